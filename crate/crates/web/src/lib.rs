//! Browser demo: a stand-in in a three-seat room. The pure functions here
//! are wrapped for JavaScript at the bottom of the file and return JSON.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;
use wasm_bindgen::prelude::*;

use seam_core::agent::{
    bearing, classify_text, is_addressed, plan_response, Agent, AgentAction, AgentParams, Classification, HeardUtterance,
    Responder, SpeakerEstimate, SpeakerParams, StateLabel, StepInputs, TraceEntry,
};
use seam_core::events::{GestureTag, PoseFrame, UtteranceEvent};
use seam_core::model::{Meeting, StandInConfig, Tick};
use seam_core::session::DEFAULT_LATE_WINDOW;
use seam_core::sim::Script;

const SCENARIO: &str = include_str!("../../../fixtures/weekend.json");
/// Silence between a line and the next one, in ticks.
const LINE_GAP: Tick = 96;
/// Ticks recorded after the last line.
const TAIL: Tick = 216;
const MAX_TICKS: Tick = 72 * 600;
const SPEAKING_RMS: f32 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum DemoError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("nothing to run")]
    Empty,
    #[error("scenario longer than {MAX_TICKS} ticks")]
    TooLong,
}

/// The built-in room: two attendees and one stand-in.
pub struct Scenario {
    pub meeting: Meeting,
    pub standin: StandInConfig,
    pub seats: BTreeMap<String, [f32; 3]>,
}

impl Scenario {
    pub fn builtin() -> Self {
        let script: Script = serde_json::from_str(SCENARIO).expect("bundled scenario parses");
        let meeting = script.meeting.expect("bundled scenario embeds a meeting");
        let standin = script.standins.and_then(|s| s.into_iter().next()).expect("bundled scenario has a stand-in");
        let mut seats: BTreeMap<String, [f32; 3]> = script.participants.iter().map(|p| (p.participant_id.clone(), p.position)).collect();
        let pos = script.standin_positions.get(&standin.absentee_id).copied().unwrap_or([0.0; 3]);
        seats.insert(standin.absentee_id.clone(), pos);
        Self { meeting, standin, seats }
    }

    pub fn standin_id(&self) -> &str {
        &self.standin.absentee_id
    }

    fn humans(&self) -> impl Iterator<Item = &str> {
        self.seats.keys().map(String::as_str).filter(move |id| *id != self.standin_id())
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Reply {
    pub addressed: bool,
    pub classification: Option<Classification>,
    pub text: Option<String>,
    pub gesture: Option<String>,
    pub duration_ticks: Option<Tick>,
}

/// How the stand-in would treat `text` spoken by an attendee.
pub fn reply_to(scenario: &Scenario, text: &str, facing_standin: bool) -> Reply {
    let u = UtteranceEvent { start_tick: 0, end_tick: 0, speaker_id: "a".into(), text: text.into(), addressed_to: None };
    if !is_addressed(&u, &scenario.standin, facing_standin) {
        return Reply { addressed: false, classification: None, text: None, gesture: None, duration_ticks: None };
    }
    let c = classify_text(text, &scenario.meeting.agenda);
    let params = AgentParams::default();
    let planned = plan_response(&c, &scenario.standin, &scenario.meeting.agenda, &Responder::Rules, &[u], &params);
    let gesture = serde_json::to_value(&planned.plan.gesture).ok().map(|v| match v {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    });
    Reply {
        addressed: true,
        classification: Some(c),
        text: Some(planned.plan.text),
        gesture,
        duration_ticks: Some(planned.plan.nominal_duration_ticks),
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SpeakerTimeline {
    pub ticks: Tick,
    pub rms: BTreeMap<String, Vec<f32>>,
    pub speaker: Vec<Option<String>>,
}

/// Parses `id start-end` talk spans, one per line, and runs speaker
/// detection over noisy levels built from them.
pub fn speaker_timeline(spans: &str, seed: u64) -> Result<SpeakerTimeline, DemoError> {
    let mut parsed: Vec<(String, Tick, Tick)> = Vec::new();
    for (i, raw) in spans.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: &str| DemoError::Parse { line: i + 1, message: m.into() };
        let (id, range) = line.split_once(char::is_whitespace).ok_or_else(|| err("expected `id start-end`"))?;
        let (a, b) = range.trim().split_once('-').ok_or_else(|| err("expected start-end"))?;
        let a: Tick = a.trim().parse().map_err(|_| err("bad start"))?;
        let b: Tick = b.trim().parse().map_err(|_| err("bad end"))?;
        if b <= a {
            return Err(err("end must follow start"));
        }
        parsed.push((id.to_string(), a, b));
    }
    let last = parsed.iter().map(|s| s.2).max().ok_or(DemoError::Empty)?;
    let ticks = last + LINE_GAP;
    if ticks > MAX_TICKS {
        return Err(DemoError::TooLong);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rms: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (id, _, _) in &parsed {
        rms.entry(id.clone()).or_insert_with(|| vec![0.0; ticks as usize]);
    }
    for (id, series) in rms.iter_mut() {
        for (t, v) in series.iter_mut().enumerate() {
            let t = t as Tick;
            let talking = parsed.iter().any(|(p, a, b)| p == id && (*a..*b).contains(&t));
            *v = if talking { SPEAKING_RMS + rng.gen_range(-0.05..0.05) } else { rng.gen_range(0.0..0.03) };
        }
    }
    let mut est = SpeakerEstimate::new(SpeakerParams::default());
    let mut speaker = Vec::with_capacity(ticks as usize);
    for t in 0..ticks {
        let now: BTreeMap<String, f32> = rms.iter().map(|(id, s)| (id.clone(), s[t as usize])).collect();
        speaker.push(est.observe(t, &now).map(str::to_string));
    }
    Ok(SpeakerTimeline { ticks, rms, speaker })
}

/// One scripted line: `id: text`, or `id*: text` when the speaker faces the stand-in.
#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub speaker: String,
    pub text: String,
    pub facing_standin: bool,
}

pub fn parse_lines(src: &str, scenario: &Scenario) -> Result<Vec<Line>, DemoError> {
    let mut out = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: String| DemoError::Parse { line: i + 1, message: m };
        let (who, text) = line.split_once(':').ok_or_else(|| err("expected `id: text`".into()))?;
        let who = who.trim();
        let (speaker, facing_standin) = match who.strip_suffix('*') {
            Some(s) => (s.trim(), true),
            None => (who, false),
        };
        if !scenario.humans().any(|h| h == speaker) {
            let known: Vec<&str> = scenario.humans().collect();
            return Err(err(format!("unknown speaker {speaker:?}; use one of {known:?}")));
        }
        let text = text.trim();
        if text.is_empty() {
            return Err(err("empty line".into()));
        }
        out.push(Line { speaker: speaker.to_string(), text: text.to_string(), facing_standin });
    }
    if out.is_empty() {
        return Err(DemoError::Empty);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Frame {
    pub tick: Tick,
    /// Attendee whose line is playing, if any.
    pub talking: Option<String>,
    pub state: StateLabel,
    pub yaw: f32,
    pub gesture: GestureTag,
    pub speaking: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Walkthrough {
    pub standin_id: String,
    pub seats: BTreeMap<String, [f32; 3]>,
    pub human_yaw: BTreeMap<String, Vec<f32>>,
    pub utterances: Vec<UtteranceEvent>,
    pub responses: Vec<UtteranceEvent>,
    pub frames: Vec<Frame>,
    pub trace: Vec<TraceEntry>,
}

/// Plays the lines to the stand-in tick by tick with the same perception
/// lag a live session applies. A line starts only once the stand-in is
/// quiet again.
pub fn walkthrough(src: &str, seed: u64) -> Result<Walkthrough, DemoError> {
    let scenario = Scenario::builtin();
    let lines = parse_lines(src, &scenario)?;
    let params = AgentParams::default();
    let id = scenario.standin_id().to_string();
    let standin_pos = scenario.seats[&id];
    let mut agent = Agent::spawn(scenario.standin.clone(), scenario.meeting.agenda.clone(), params.clone(), standin_pos, seed, 0);
    let mut estimate = SpeakerEstimate::new(params.speaker.clone());
    let lag = DEFAULT_LATE_WINDOW;
    let words_ticks = |text: &str| -> Tick {
        let words = text.split_whitespace().count().max(1) as u64;
        (words * 60 * params.tick_rate as u64).div_ceil(params.words_per_minute as u64).max(24)
    };
    let others: BTreeMap<String, [f32; 3]> = scenario.seats.iter().filter(|(k, _)| **k != id).map(|(k, v)| (k.clone(), *v)).collect();
    let rest_yaw = |who: &str| -> f32 {
        let me = scenario.seats[who];
        let other = others.iter().find(|(k, _)| k.as_str() != who).map(|(_, p)| *p).unwrap_or([0.0; 3]);
        bearing(me, other)
    };

    let mut human_yaw: BTreeMap<String, Vec<f32>> = others.keys().map(|k| (k.clone(), Vec::new())).collect();
    let mut talking_at: Vec<Option<String>> = Vec::new();
    let mut yaw_at: BTreeMap<String, Vec<f32>> = others.keys().map(|k| (k.clone(), Vec::new())).collect();
    let mut utterances: Vec<UtteranceEvent> = Vec::new();
    let mut responses = Vec::new();
    let mut frames = Vec::new();
    let mut next = 0usize;
    let mut current: Option<(usize, Tick, Tick)> = None;
    let mut ready_at: Tick = 0;
    let mut busy_until: Tick = 0;
    let mut t: Tick = 0;
    loop {
        if current.is_none() && next < lines.len() && t >= ready_at && t >= busy_until && !agent.state().is_responding() {
            let len = words_ticks(&lines[next].text);
            current = Some((next, t, t + len - 1));
            next += 1;
        }
        let talking = current.map(|(i, _, _)| lines[i].speaker.clone());
        for (who, yaws) in yaw_at.iter_mut() {
            let facing = current.is_some_and(|(i, _, _)| lines[i].speaker == *who && lines[i].facing_standin);
            yaws.push(if facing { bearing(scenario.seats[who], standin_pos) } else { rest_yaw(who) });
        }
        talking_at.push(talking.clone());
        if let Some((i, s, e)) = current {
            if t == e {
                let l = &lines[i];
                utterances.push(UtteranceEvent {
                    start_tick: s,
                    end_tick: e,
                    speaker_id: l.speaker.clone(),
                    text: l.text.clone(),
                    addressed_to: None,
                });
                current = None;
                ready_at = t + LINE_GAP;
                busy_until = e + lag + 1;
            }
        }

        let mut inputs = StepInputs { positions: others.clone(), ..StepInputs::default() };
        if let Some(p) = t.checked_sub(lag) {
            let level: BTreeMap<String, f32> = others
                .keys()
                .map(|k| (k.clone(), if talking_at[p as usize].as_deref() == Some(k) { SPEAKING_RMS } else { 0.0 }))
                .collect();
            estimate.observe(p, &level);
            inputs.utterances = utterances
                .iter()
                .filter(|u| u.end_tick == p)
                .map(|u| {
                    let yaw = yaw_at[&u.speaker_id][u.start_tick as usize];
                    HeardUtterance {
                        utterance: u.clone(),
                        speaker_pose: Some(PoseFrame {
                            tick: u.start_tick,
                            participant_id: u.speaker_id.clone(),
                            position: scenario.seats[&u.speaker_id],
                            yaw,
                            gesture_tag: GestureTag::None,
                            speaking_hint: true,
                        }),
                    }
                })
                .collect();
        }
        inputs.active_speaker = estimate.active.clone();
        inputs.silent_ticks = estimate.silent_ticks();
        if let AgentAction::SpeakPlan { plan, start_tick, addressed_to } = agent.step(t, inputs) {
            let end = start_tick + plan.nominal_duration_ticks.max(1) - 1;
            busy_until = busy_until.max(end + 1);
            responses.push(UtteranceEvent {
                start_tick,
                end_tick: end,
                speaker_id: id.clone(),
                text: plan.text,
                addressed_to: Some(addressed_to),
            });
        }
        let pose = agent.pose(t);
        frames.push(Frame {
            tick: t,
            talking,
            state: agent.state().label(),
            yaw: pose.yaw,
            gesture: pose.gesture_tag,
            speaking: pose.speaking_hint,
        });
        t += 1;
        if next == lines.len() && current.is_none() && t >= busy_until + TAIL && !agent.state().is_responding() {
            break;
        }
        if t >= MAX_TICKS {
            return Err(DemoError::TooLong);
        }
    }
    for (who, yaws) in yaw_at {
        human_yaw.insert(who, yaws);
    }
    Ok(Walkthrough {
        standin_id: id,
        seats: scenario.seats,
        human_yaw,
        utterances,
        responses,
        frames,
        trace: agent.trace().to_vec(),
    })
}

fn to_js<T: Serialize>(r: Result<T, DemoError>) -> Result<String, JsValue> {
    match r {
        Ok(v) => Ok(serde_json::to_string(&v).expect("demo output serializes")),
        Err(e) => Err(JsValue::from_str(&e.to_string())),
    }
}

/// JSON [`Reply`] for one utterance.
#[wasm_bindgen(js_name = replyTo)]
pub fn reply_to_js(text: &str, facing_standin: bool) -> String {
    serde_json::to_string(&reply_to(&Scenario::builtin(), text, facing_standin)).expect("reply serializes")
}

/// JSON [`SpeakerTimeline`] for `id start-end` spans.
#[wasm_bindgen(js_name = speakerTimeline)]
pub fn speaker_timeline_js(spans: &str, seed: u32) -> Result<String, JsValue> {
    to_js(speaker_timeline(spans, seed as u64))
}

/// JSON [`Walkthrough`] for `id: text` lines.
#[wasm_bindgen(js_name = walkthrough)]
pub fn walkthrough_js(lines: &str, seed: u32) -> Result<String, JsValue> {
    to_js(walkthrough(lines, seed as u64))
}

/// The bundled meeting, for labelling the page.
#[wasm_bindgen(js_name = scenario)]
pub fn scenario_js() -> String {
    let s = Scenario::builtin();
    serde_json::json!({
        "meeting": s.meeting,
        "standin_id": s.standin.absentee_id,
        "addressing_names": s.standin.addressing_names,
        "seats": s.seats,
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn addressed_topic_question_gets_its_plan() {
        let s = Scenario::builtin();
        let r = reply_to(&s, "Lee, which beach should we go to?", false);
        assert!(r.addressed);
        let Some(Classification::Topic { item_id, .. }) = &r.classification else { panic!("expected a topic: {r:?}") };
        assert_eq!(r.text.as_deref(), Some(s.standin.responses[item_id].text.as_str()));
    }

    #[test]
    fn unaddressed_chatter_is_ignored() {
        let r = reply_to(&Scenario::builtin(), "which beach should we go to?", false);
        assert_eq!(r, Reply { addressed: false, classification: None, text: None, gesture: None, duration_ticks: None });
    }

    #[test]
    fn facing_counts_as_addressing() {
        assert!(reply_to(&Scenario::builtin(), "what do you think?", true).addressed);
    }

    #[test]
    fn speaker_follows_spans() {
        let tl = speaker_timeline("a 0-200\nb 300-500", 1).unwrap();
        assert_eq!(tl.ticks, 596);
        assert_eq!(tl.speaker[150].as_deref(), Some("a"));
        assert_eq!(tl.speaker[450].as_deref(), Some("b"));
        assert!(tl.speaker[10].is_none(), "needs a full window before committing");
    }

    #[test]
    fn bad_spans_are_reported() {
        assert!(matches!(speaker_timeline("a 5-2", 0), Err(DemoError::Parse { line: 1, .. })));
        assert_eq!(speaker_timeline("", 0), Err(DemoError::Empty));
    }

    #[test]
    fn walkthrough_answers_addressed_lines_only() {
        let s = Scenario::builtin();
        let name = &s.standin.addressing_names[0];
        let src = format!("a: morning everyone\nb*: {name}, what food do you want?\na: sounds good");
        let w = walkthrough(&src, 0).unwrap();
        assert_eq!(w.utterances.len(), 3);
        assert_eq!(w.responses.len(), 1);
        let asked = &w.utterances[1];
        assert_eq!(w.responses[0].start_tick, asked.end_tick + DEFAULT_LATE_WINDOW);
        assert_eq!(w.responses[0].addressed_to.as_deref(), Some("b"));
        assert!(w.utterances[2].start_tick > w.responses[0].end_tick);
        assert_eq!(w.frames.len() as Tick, w.frames.last().unwrap().tick + 1);
        assert!(w.frames.iter().any(|f| matches!(f.state, StateLabel::LookingAtSpeaker(_))));
    }

    #[test]
    fn walkthrough_is_deterministic() {
        let src = "a*: Lee, where should we stay?";
        let a = serde_json::to_string(&walkthrough(src, 9).unwrap()).unwrap();
        let b = serde_json::to_string(&walkthrough(src, 9).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_speakers_are_rejected() {
        assert!(matches!(walkthrough("zed: hi", 0), Err(DemoError::Parse { line: 1, .. })));
        assert!(matches!(walkthrough("   ", 0), Err(DemoError::Empty)));
    }
}
