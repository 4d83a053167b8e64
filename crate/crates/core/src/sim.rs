//! Scripted clients and a virtual-time runner. Every message goes through
//! the wire codec and a latency queue, exactly as it would over a socket.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentParams, TraceEntry, TraceEvent};
use crate::events::{AudioChunk, GestureTag, PoseFrame, UtteranceEvent};
use crate::model::{Meeting, Role, StandInConfig, Tick, DEFAULT_TICK_RATE};
use crate::protocol::{encode_frame, FrameDecoder, Hello, Message, ProtocolError};
use crate::recorder::RecordingManifest;
use crate::session::{DropCounters, Session, SessionError, SessionOptions, DEFAULT_LATE_WINDOW};

/// Virtual clock resolution: 1000 units per tick at 72 ticks/s.
const UNITS_PER_TICK: u64 = 1000;
/// Gesture tags set by a script hold for this many ticks.
pub const GESTURE_HOLD_TICKS: u64 = 36;
pub const SPEAKING_RMS: f32 = 0.2;
pub const RMS_JITTER: f32 = 0.05;
/// Extra ticks run after the last scripted action when no duration is given.
pub const DEFAULT_TAIL_TICKS: u64 = 432;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid script: {0}")]
    Script(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed script file: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptAction {
    Say {
        text: String,
        duration_ticks: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        addressed_to: Option<String>,
    },
    Move { position: [f32; 3], yaw: f32 },
    Gesture(GestureTag),
    Silence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedAction {
    pub at_tick: Tick,
    pub action: ScriptAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedParticipant {
    pub participant_id: String,
    #[serde(default)]
    pub display_name: Option<String>,
    pub position: [f32; 3],
    #[serde(default)]
    pub yaw: f32,
    #[serde(default)]
    pub timeline: Vec<TimedAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub seed: u64,
    #[serde(default)]
    pub injected_latency_ms: u64,
    #[serde(default = "default_iteration")]
    pub iteration: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_ticks: Option<Tick>,
    #[serde(default)]
    pub standin_positions: BTreeMap<String, [f32; 3]>,
    pub participants: Vec<ScriptedParticipant>,
    /// A script may carry its own scenario so it can be run standalone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meeting: Option<Meeting>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standins: Option<Vec<StandInConfig>>,
}

fn default_iteration() -> u32 {
    1
}

impl Script {
    pub fn from_file(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|source| SimError::Io { path: path.to_path_buf(), source })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Last tick the script runs for.
    pub fn duration(&self) -> Tick {
        if let Some(d) = self.duration_ticks {
            return d;
        }
        let last = self
            .participants
            .iter()
            .flat_map(|p| &p.timeline)
            .map(|a| match &a.action {
                ScriptAction::Say { duration_ticks, .. } => a.at_tick + duration_ticks,
                _ => a.at_tick + 1,
            })
            .max()
            .unwrap_or(0);
        last + DEFAULT_TAIL_TICKS
    }

    pub fn validate(&self, meeting: &Meeting) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Script(m));
        let mut seen = BTreeSet::new();
        for p in &self.participants {
            if !seen.insert(&p.participant_id) {
                return bad(format!("participant {} listed twice", p.participant_id));
            }
            match meeting.role_of(&p.participant_id, self.iteration) {
                Ok(Role::Attendee) => {}
                Ok(Role::Absentee) => return bad(format!("{} is an absentee in iteration {}", p.participant_id, self.iteration)),
                Err(e) => return bad(e.to_string()),
            }
            let mut prev = 0;
            for a in &p.timeline {
                if a.at_tick < prev {
                    return bad(format!("{}: at_tick {} goes backwards", p.participant_id, a.at_tick));
                }
                prev = a.at_tick;
                match &a.action {
                    ScriptAction::Say { duration_ticks: 0, .. } => {
                        return bad(format!("{}: say at {} has zero duration", p.participant_id, a.at_tick))
                    }
                    ScriptAction::Say { text, .. } if text.trim().is_empty() => {
                        return bad(format!("{}: say at {} has no text", p.participant_id, a.at_tick))
                    }
                    ScriptAction::Move { position, yaw } if !position.iter().all(|c| c.is_finite()) || !(0.0..360.0).contains(yaw) => {
                        return bad(format!("{}: move at {} out of range", p.participant_id, a.at_tick))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

struct Speech {
    start: Tick,
    end: Tick,
    text: String,
    addressed_to: Option<String>,
}

struct Client {
    id: String,
    display_name: String,
    position: [f32; 3],
    yaw: f32,
    gesture: GestureTag,
    gesture_until: Tick,
    speech: Option<Speech>,
    timeline: Vec<TimedAction>,
    next: usize,
    rng: ChaCha8Rng,
    inbox: FrameDecoder,
    received: BTreeMap<String, u64>,
    seen: BTreeSet<String>,
    duplicates: u64,
}

impl Client {
    fn new(p: &ScriptedParticipant, seed: u64) -> Self {
        let salt = p.participant_id.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3));
        Self {
            id: p.participant_id.clone(),
            display_name: p.display_name.clone().unwrap_or_else(|| p.participant_id.clone()),
            position: p.position,
            yaw: p.yaw,
            gesture: GestureTag::None,
            gesture_until: 0,
            speech: None,
            timeline: p.timeline.clone(),
            next: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ salt),
            inbox: FrameDecoder::default(),
            received: BTreeMap::new(),
            seen: BTreeSet::new(),
            duplicates: 0,
        }
    }

    fn finish_speech(&mut self, last: Tick, out: &mut Vec<Message>) {
        if let Some(s) = self.speech.take() {
            if last >= s.start {
                out.push(Message::Utterance(UtteranceEvent {
                    start_tick: s.start,
                    end_tick: last.min(s.end),
                    speaker_id: self.id.clone(),
                    text: s.text,
                    addressed_to: s.addressed_to,
                }));
            }
        }
    }

    /// Messages this client sends during tick `t`.
    fn step(&mut self, t: Tick) -> Vec<Message> {
        let mut out = Vec::new();
        while self.next < self.timeline.len() && self.timeline[self.next].at_tick <= t {
            let action = self.timeline[self.next].action.clone();
            self.next += 1;
            match action {
                ScriptAction::Say { text, duration_ticks, addressed_to } => {
                    if t > 0 {
                        self.finish_speech(t - 1, &mut out);
                    }
                    self.speech = Some(Speech { start: t, end: t + duration_ticks - 1, text, addressed_to });
                }
                ScriptAction::Move { position, yaw } => {
                    self.position = position;
                    self.yaw = yaw;
                }
                ScriptAction::Gesture(tag) => {
                    self.gesture = tag;
                    self.gesture_until = t + GESTURE_HOLD_TICKS;
                }
                ScriptAction::Silence => {
                    if t > 0 {
                        self.finish_speech(t - 1, &mut out);
                    }
                    self.speech = None;
                }
            }
        }
        if t >= self.gesture_until {
            self.gesture = GestureTag::None;
        }
        let speaking = self.speech.as_ref().is_some_and(|s| s.start <= t && t <= s.end);
        out.insert(
            0,
            Message::Pose(PoseFrame {
                tick: t,
                participant_id: self.id.clone(),
                position: self.position,
                yaw: self.yaw,
                gesture_tag: self.gesture,
                speaking_hint: speaking,
            }),
        );
        let rms = if speaking { SPEAKING_RMS + self.rng.gen_range(-RMS_JITTER..=RMS_JITTER) } else { 0.0 };
        out.push(Message::Audio(AudioChunk { tick: t, participant_id: self.id.clone(), rms, pcm: None }));
        if self.speech.as_ref().is_some_and(|s| s.end == t) {
            self.finish_speech(t, &mut out);
        }
        out
    }

    fn deliver(&mut self, bytes: &[u8]) -> Result<(), ProtocolError> {
        self.inbox.push(bytes);
        while let Some(m) = self.inbox.next_message()? {
            let key = match &m {
                Message::Pose(p) => Some(format!("pose/{}/{}", p.participant_id, p.tick)),
                Message::Audio(a) => Some(format!("audio/{}/{}", a.participant_id, a.tick)),
                Message::Utterance(u) => Some(format!("utterance/{}/{}/{}", u.speaker_id, u.start_tick, u.end_tick)),
                _ => None,
            };
            if let Some(k) = key {
                if !self.seen.insert(k) {
                    self.duplicates += 1;
                }
            }
            *self.received.entry(m.type_name().to_string()).or_default() += 1;
        }
        Ok(())
    }
}

/// Per-client delivery statistics.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deliveries {
    pub by_type: BTreeMap<String, u64>,
    pub duplicates: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimResult {
    pub manifest: RecordingManifest,
    pub recording_dir: PathBuf,
    pub agent_trace: Vec<TraceEntry>,
    pub drop_counters: DropCounters,
    pub deliveries: BTreeMap<String, Deliveries>,
    /// Human events the session accepted, per sender.
    pub sent: BTreeMap<String, u64>,
    pub degradations: Vec<String>,
    pub ticks: Tick,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub agent: AgentParams,
    pub late_window: Option<u64>,
}

/// Runs the script against a fresh session and closes it.
pub fn run(
    script: &Script,
    meeting: &Meeting,
    standin_configs: &[StandInConfig],
    recordings_dir: &Path,
    options: RunOptions,
) -> Result<SimResult, SimError> {
    script.validate(meeting)?;
    let session_options = SessionOptions {
        tick_rate: DEFAULT_TICK_RATE,
        late_window: options.late_window.unwrap_or(DEFAULT_LATE_WINDOW),
        agent: options.agent,
        standin_positions: script.standin_positions.clone(),
        ..SessionOptions::default()
    };
    let mut session =
        Session::create(meeting.clone(), script.iteration, standin_configs.to_vec(), script.seed, recordings_dir, session_options)?;

    let latency = script.injected_latency_ms * DEFAULT_TICK_RATE as u64;
    let mut clients: Vec<Client> = script.participants.iter().map(|p| Client::new(p, script.seed)).collect();
    clients.sort_by(|a, b| a.id.cmp(&b.id));
    let index: BTreeMap<String, usize> = clients.iter().enumerate().map(|(i, c)| (c.id.clone(), i)).collect();

    // (arrival time, sequence) orders both queues deterministically.
    let mut uplink: BinaryHeap<Reverse<(u64, u64, usize, Vec<u8>)>> = BinaryHeap::new();
    let mut downlink: BinaryHeap<Reverse<(u64, u64, usize, Vec<u8>)>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut server_inbox: Vec<FrameDecoder> = clients.iter().map(|_| FrameDecoder::default()).collect();
    let mut sent: BTreeMap<String, u64> = BTreeMap::new();

    let route = |out: Vec<crate::session::Outbound>, now: u64, seq: &mut u64, downlink: &mut BinaryHeap<_>, index: &BTreeMap<String, usize>| {
        for o in out {
            let bytes = encode_frame(&o.message);
            for (id, &i) in index {
                if o.to.includes(id) {
                    *seq += 1;
                    downlink.push(Reverse((now + latency, *seq, i, bytes.clone())));
                }
            }
        }
    };

    for (i, c) in clients.iter().enumerate() {
        seq += 1;
        let hello = Message::Hello(Hello { participant_id: c.id.clone(), display_name: c.display_name.clone() });
        uplink.push(Reverse((latency, seq, i, encode_frame(&hello))));
    }

    let duration = script.duration();
    // One extra pass after the last tick lets in-flight uplink traffic land.
    for t in 0..=duration {
        let now = t * UNITS_PER_TICK;
        let running = t < duration;
        if running {
            for (i, c) in clients.iter_mut().enumerate() {
                for m in c.step(t) {
                    seq += 1;
                    uplink.push(Reverse((now + latency, seq, i, encode_frame(&m))));
                }
            }
        }
        let cutoff = if running { now } else { u64::MAX };
        while uplink.peek().is_some_and(|Reverse((at, ..))| *at <= cutoff) {
            let Reverse((_, _, i, bytes)) = uplink.pop().expect("peeked");
            server_inbox[i].push(&bytes);
            while let Some(m) = server_inbox[i].next_message()? {
                let id = clients[i].id.clone();
                let out = match m {
                    Message::Hello(h) => {
                        let (welcome, mut out) = session.join(h)?;
                        out.push(crate::session::Outbound {
                            to: crate::session::Recipient::Only(id.clone()),
                            message: Message::Welcome(welcome),
                        });
                        out
                    }
                    other => {
                        let before = session.drop_counters().total();
                        let out = session.ingest(&id, other)?;
                        if session.drop_counters().total() == before {
                            *sent.entry(id).or_default() += 1;
                        }
                        out
                    }
                };
                route(out, now, &mut seq, &mut downlink, &index);
            }
        }
        if running {
            let out = session.tick()?;
            route(out, now, &mut seq, &mut downlink, &index);
        }
        while downlink.peek().is_some_and(|Reverse((at, ..))| *at <= now) {
            let Reverse((_, _, i, bytes)) = downlink.pop().expect("peeked");
            clients[i].deliver(&bytes)?;
        }
    }
    let (manifest, out) = session.close()?;
    route(out, duration * UNITS_PER_TICK, &mut seq, &mut downlink, &index);
    while let Some(Reverse((_, _, i, bytes))) = downlink.pop() {
        clients[i].deliver(&bytes)?;
    }

    Ok(SimResult {
        manifest,
        recording_dir: session.recording_dir().to_path_buf(),
        agent_trace: session.agent_trace(),
        drop_counters: session.drop_counters(),
        deliveries: clients
            .iter()
            .map(|c| (c.id.clone(), Deliveries { by_type: c.received.clone(), duplicates: c.duplicates }))
            .collect(),
        sent,
        degradations: session.degradations(),
        ticks: duration,
    })
}

/// Runs a script that embeds its own meeting and stand-in configs.
pub fn run_embedded(script: &Script, recordings_dir: &Path, options: RunOptions) -> Result<SimResult, SimError> {
    let meeting = script.meeting.as_ref().ok_or_else(|| SimError::Script("script has no embedded meeting".into()))?;
    let standins = script.standins.clone().unwrap_or_default();
    run(script, meeting, &standins, recordings_dir, options)
}

/// One expected trace entry: an event that must occur within `[from_tick, to_tick]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedEntry {
    pub from_tick: Tick,
    pub to_tick: Tick,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participant_id: Option<String>,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceAssertion {
    pub expected: Vec<ExpectedEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub index: usize,
    pub tick: Option<Tick>,
    pub expected: String,
    pub actual: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub passed: bool,
    pub checked: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<Divergence>,
}

fn describe(e: &TraceEvent) -> String {
    serde_json::to_string(e).expect("trace events serialize")
}

/// Matches the trace entry-for-entry against the assertion.
pub fn assert_trace(trace: &[TraceEntry], assertion: &TraceAssertion) -> TraceReport {
    let n = trace.len().max(assertion.expected.len());
    for i in 0..n {
        let (actual, expected) = (trace.get(i), assertion.expected.get(i));
        let diverged = match (actual, expected) {
            (Some(a), Some(e)) => {
                a.event != e.event
                    || a.tick < e.from_tick
                    || a.tick > e.to_tick
                    || e.participant_id.as_ref().is_some_and(|p| *p != a.participant_id)
            }
            _ => true,
        };
        if diverged {
            return TraceReport {
                passed: false,
                checked: i,
                divergence: Some(Divergence {
                    index: i,
                    tick: actual.map(|a| a.tick).or(expected.map(|e| e.from_tick)),
                    expected: expected
                        .map(|e| format!("{} in [{}, {}]", describe(&e.event), e.from_tick, e.to_tick))
                        .unwrap_or_else(|| "end of trace".into()),
                    actual: actual.map(|a| format!("{} at {}", describe(&a.event), a.tick)).unwrap_or_else(|| "end of trace".into()),
                }),
            };
        }
    }
    TraceReport { passed: true, checked: n, divergence: None }
}
