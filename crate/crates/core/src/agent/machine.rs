//! The stand-in's behaviour state machine.
//!
//! ```text
//!   LookingAround ──speaker──▶ LookingAtSpeaker ──silence──▶ LookingAround
//!        │                            │
//!        └──────addressed─────────────┴──▶ RespondingTopic / RespondingGeneric
//!                                              │ finished
//!                                              ▼
//!                                        LookingAround
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::f32::consts::PI;
use std::sync::Arc;
use std::time::Duration;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classify::{bearing, best_item, classify, normalize_yaw, Classification};
use super::clients::{llm_with_deadline, ChatMessage, LlmClient, LlmRequest, DEFAULT_DEADLINE};
use super::speaker::SpeakerParams;
use crate::events::{GestureTag, PoseFrame, UtteranceEvent};
use crate::model::{
    AgendaItem, Gesture, ParticipantProfile, ResponsePlan, StandInConfig, Tick, DEFAULT_TICK_RATE,
    DEFAULT_WORDS_PER_MINUTE,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub speaker: SpeakerParams,
    pub nod_period: u64,
    pub gaze_period: u64,
    pub gaze_amplitude_deg: f32,
    pub words_per_minute: u32,
    pub queue_depth: usize,
    pub facing_tolerance_deg: f32,
    pub tick_rate: u32,
    /// Answer un-addressed but clearly on-topic remarks after a lull.
    pub proactive: bool,
    pub proactive_min_score: u32,
    pub proactive_silence: u64,
    #[serde(with = "millis")]
    pub client_deadline: Duration,
}

impl Default for AgentParams {
    fn default() -> Self {
        Self {
            speaker: SpeakerParams::default(),
            nod_period: 36,
            gaze_period: 432,
            gaze_amplitude_deg: 40.0,
            words_per_minute: DEFAULT_WORDS_PER_MINUTE,
            queue_depth: 4,
            facing_tolerance_deg: 30.0,
            tick_rate: DEFAULT_TICK_RATE,
            proactive: false,
            proactive_min_score: 2,
            proactive_silence: 72,
            client_deadline: DEFAULT_DEADLINE,
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum AgentState {
    LookingAround,
    LookingAtSpeaker { target: String },
    RespondingTopic { item_id: String, remaining_ticks: u64 },
    RespondingGeneric { remaining_ticks: u64 },
}

impl AgentState {
    pub fn label(&self) -> StateLabel {
        match self {
            AgentState::LookingAround => StateLabel::LookingAround,
            AgentState::LookingAtSpeaker { target } => StateLabel::LookingAtSpeaker(target.clone()),
            AgentState::RespondingTopic { item_id, .. } => StateLabel::RespondingTopic(item_id.clone()),
            AgentState::RespondingGeneric { .. } => StateLabel::RespondingGeneric,
        }
    }

    pub fn is_responding(&self) -> bool {
        matches!(self, AgentState::RespondingTopic { .. } | AgentState::RespondingGeneric { .. })
    }
}

/// An [`AgentState`] without its countdown, as recorded in traces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateLabel {
    LookingAround,
    LookingAtSpeaker(String),
    RespondingTopic(String),
    RespondingGeneric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum AgentAction {
    FaceAndNod { target: String, yaw: f32, nod_phase: u64 },
    IdleGaze { yaw: f32 },
    SpeakPlan { plan: ResponsePlan, start_tick: Tick, addressed_to: String },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Enter { state: StateLabel },
    Respond { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub tick: Tick,
    pub participant_id: String,
    #[serde(flatten)]
    pub event: TraceEvent,
}

/// Utterance handed to the agent, with the speaker's facing at its start.
#[derive(Debug, Clone, PartialEq)]
pub struct HeardUtterance {
    pub utterance: UtteranceEvent,
    pub speaker_pose: Option<PoseFrame>,
}

#[derive(Debug, Clone, Default)]
pub struct StepInputs {
    pub active_speaker: Option<String>,
    pub silent_ticks: u64,
    pub utterances: Vec<HeardUtterance>,
    /// Latest known position of each other participant.
    pub positions: BTreeMap<String, [f32; 3]>,
}

/// Produces the words and gesture for a classified utterance.
#[derive(Clone, Default)]
pub enum Responder {
    #[default]
    Rules,
    Llm { client: Arc<dyn LlmClient>, profile: ParticipantProfile },
}

impl std::fmt::Debug for Responder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Responder::Rules => f.write_str("Rules"),
            Responder::Llm { profile, .. } => write!(f, "Llm({})", profile.participant_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedResponse {
    pub plan: ResponsePlan,
    pub degradation: Option<String>,
}

fn rule_plan(classification: &Classification, config: &StandInConfig) -> ResponsePlan {
    match classification {
        Classification::Topic { item_id, .. } => config.responses.get(item_id).unwrap_or(&config.fallback).clone(),
        Classification::Other => config.fallback.clone(),
    }
}

pub fn build_llm_prompt(
    profile: &ParticipantProfile,
    config: &StandInConfig,
    agenda: &[AgendaItem],
    history: &[UtteranceEvent],
) -> LlmRequest {
    let mut system = format!(
        "You are attending a meeting on behalf of {}. Answer briefly, in the first person.\nBackground: {}\nPersonality: {}\nAgenda notes:\n",
        profile.display_name, profile.background, profile.personality
    );
    for item in agenda {
        let note = config.responses.get(&item.item_id).map(|p| p.text.as_str()).unwrap_or("(no note)");
        system.push_str(&format!("- {}: {}\n", item.label, note));
    }
    system.push_str(&format!("If unsure, say: {}", config.fallback.text));
    let start = history.len().saturating_sub(10);
    let messages = history[start..]
        .iter()
        .map(|u| ChatMessage {
            role: if u.speaker_id == config.absentee_id { "assistant" } else { "user" }.to_string(),
            content: format!("{}: {}", u.speaker_id, u.text),
        })
        .collect();
    LlmRequest { system, messages }
}

pub fn plan_response(
    classification: &Classification,
    config: &StandInConfig,
    agenda: &[AgendaItem],
    responder: &Responder,
    history: &[UtteranceEvent],
    params: &AgentParams,
) -> PlannedResponse {
    let rules = rule_plan(classification, config);
    let Responder::Llm { client, profile } = responder else {
        return PlannedResponse { plan: rules, degradation: None };
    };
    let request = build_llm_prompt(profile, config, agenda, history);
    match llm_with_deadline(client, request, params.client_deadline) {
        Ok(reply) if !reply.text.trim().is_empty() => {
            let gesture = match classification {
                Classification::Topic { .. } => rules.gesture.clone(),
                Classification::Other => Gesture::HeadPoint,
            };
            let plan = ResponsePlan::with_rate(reply.text.trim(), gesture, params.words_per_minute, params.tick_rate);
            PlannedResponse { plan, degradation: None }
        }
        Ok(_) => degraded(rules, "llm returned empty text".into()),
        Err(e) => degraded(rules, format!("llm failed: {e}")),
    }
}

fn degraded(plan: ResponsePlan, why: String) -> PlannedResponse {
    warn!("{why}; using configured response");
    PlannedResponse { plan, degradation: Some(why) }
}

#[derive(Debug, Clone)]
struct Queued {
    utterance: UtteranceEvent,
    classification: Classification,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub participant_id: String,
    pub position: [f32; 3],
    config: StandInConfig,
    agenda: Vec<AgendaItem>,
    params: AgentParams,
    responder: Responder,
    state: AgentState,
    state_since: Tick,
    home_yaw: f32,
    gaze_phase: u64,
    queue: VecDeque<Queued>,
    history: Vec<UtteranceEvent>,
    positions: BTreeMap<String, [f32; 3]>,
    respond_to: Option<String>,
    current_plan: Option<ResponsePlan>,
    proactive_pending: Option<Queued>,
    trace: Vec<TraceEntry>,
    degradations: Vec<String>,
    pub queue_dropped: u64,
}

impl Agent {
    pub fn spawn(
        config: StandInConfig,
        agenda: Vec<AgendaItem>,
        params: AgentParams,
        position: [f32; 3],
        seed: u64,
        spawn_tick: Tick,
    ) -> Self {
        let id = config.absentee_id.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(id.as_bytes()));
        let gaze_phase = rng.gen_range(0..params.gaze_period.max(1));
        let home_yaw = if position[0] == 0.0 && position[2] == 0.0 { 0.0 } else { bearing(position, [0.0; 3]) };
        Self {
            participant_id: id.clone(),
            position,
            config,
            agenda,
            params,
            responder: Responder::Rules,
            state: AgentState::LookingAround,
            state_since: spawn_tick,
            home_yaw,
            gaze_phase,
            queue: VecDeque::new(),
            history: Vec::new(),
            positions: BTreeMap::new(),
            respond_to: None,
            current_plan: None,
            proactive_pending: None,
            trace: vec![TraceEntry {
                tick: spawn_tick,
                participant_id: id,
                event: TraceEvent::Enter { state: StateLabel::LookingAround },
            }],
            degradations: Vec::new(),
            queue_dropped: 0,
        }
    }

    pub fn with_responder(mut self, responder: Responder) -> Self {
        self.responder = responder;
        self
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn config(&self) -> &StandInConfig {
        &self.config
    }

    pub fn params(&self) -> &AgentParams {
        &self.params
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn degradations(&self) -> &[String] {
        &self.degradations
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn idle_yaw(&self, tick: Tick) -> f32 {
        let period = self.params.gaze_period.max(1);
        let phase = ((tick + self.gaze_phase) % period) as f32 / period as f32;
        normalize_yaw(self.home_yaw + self.params.gaze_amplitude_deg * (2.0 * PI * phase).sin())
    }

    fn yaw_towards(&self, target: &str) -> f32 {
        self.positions.get(target).map(|p| bearing(self.position, *p)).unwrap_or(self.home_yaw)
    }

    /// Advances one tick and returns the single action taken.
    pub fn step(&mut self, tick: Tick, inputs: StepInputs) -> AgentAction {
        self.positions = inputs.positions;
        let mut addressed = Vec::new();
        for heard in inputs.utterances {
            let faces = heard
                .speaker_pose
                .as_ref()
                .is_some_and(|p| super::classify::faces(p, self.position, self.params.facing_tolerance_deg));
            let own = heard.utterance.speaker_id == self.participant_id;
            if !own {
                match classify(&heard.utterance, &self.agenda, &self.config, faces) {
                    Some(classification) => addressed.push(Queued { utterance: heard.utterance.clone(), classification }),
                    None if self.params.proactive && heard.utterance.addressed_to.is_none() => {
                        if let Some((item, score)) = best_item(&heard.utterance.text, &self.agenda) {
                            if score >= self.params.proactive_min_score {
                                self.proactive_pending = Some(Queued {
                                    utterance: heard.utterance.clone(),
                                    classification: Classification::Topic { item_id: item.item_id.clone(), score },
                                });
                            }
                        }
                    }
                    None => {}
                }
            }
            self.history.push(heard.utterance);
        }
        if !addressed.is_empty() {
            self.proactive_pending = None;
        }

        if self.state.is_responding() {
            for q in addressed {
                self.enqueue(q);
            }
            let remaining = match &mut self.state {
                AgentState::RespondingTopic { remaining_ticks, .. } | AgentState::RespondingGeneric { remaining_ticks } => {
                    *remaining_ticks -= 1;
                    *remaining_ticks
                }
                _ => unreachable!(),
            };
            if remaining > 0 {
                return AgentAction::None;
            }
            self.current_plan = None;
            self.respond_to = None;
            if let Some(next) = self.queue.pop_front() {
                return self.begin_response(tick, next);
            }
            self.enter(tick, AgentState::LookingAround);
            return AgentAction::IdleGaze { yaw: self.idle_yaw(tick) };
        }

        let mut addressed = addressed.into_iter();
        if let Some(first) = self.queue.pop_front().or_else(|| addressed.next()) {
            for rest in addressed {
                self.enqueue(rest);
            }
            return self.begin_response(tick, first);
        }

        if self.proactive_pending.is_some() && inputs.silent_ticks >= self.params.proactive_silence {
            let q = self.proactive_pending.take().expect("checked");
            return self.begin_response(tick, q);
        }

        match inputs.active_speaker {
            Some(target) if target != self.participant_id => {
                if !matches!(&self.state, AgentState::LookingAtSpeaker { target: t } if *t == target) {
                    self.enter(tick, AgentState::LookingAtSpeaker { target: target.clone() });
                }
                let nod_phase = (tick - self.state_since) % self.params.nod_period.max(1);
                AgentAction::FaceAndNod { yaw: self.yaw_towards(&target), target, nod_phase }
            }
            _ => {
                if self.state != AgentState::LookingAround {
                    self.enter(tick, AgentState::LookingAround);
                }
                AgentAction::IdleGaze { yaw: self.idle_yaw(tick) }
            }
        }
    }

    fn enqueue(&mut self, q: Queued) {
        if self.queue.len() >= self.params.queue_depth.max(1) {
            self.queue.pop_front();
            self.queue_dropped += 1;
        }
        self.queue.push_back(q);
    }

    fn begin_response(&mut self, tick: Tick, q: Queued) -> AgentAction {
        let planned = plan_response(&q.classification, &self.config, &self.agenda, &self.responder, &self.history, &self.params);
        if let Some(d) = planned.degradation {
            self.degradations.push(d);
        }
        let plan = planned.plan;
        let remaining_ticks = plan.nominal_duration_ticks.max(1);
        let next = match &q.classification {
            Classification::Topic { item_id, .. } => AgentState::RespondingTopic { item_id: item_id.clone(), remaining_ticks },
            Classification::Other => AgentState::RespondingGeneric { remaining_ticks },
        };
        self.enter(tick, next);
        self.trace.push(TraceEntry {
            tick,
            participant_id: self.participant_id.clone(),
            event: TraceEvent::Respond { text: plan.text.clone() },
        });
        self.respond_to = Some(q.utterance.speaker_id.clone());
        self.current_plan = Some(plan.clone());
        AgentAction::SpeakPlan { plan, start_tick: tick, addressed_to: q.utterance.speaker_id }
    }

    fn enter(&mut self, tick: Tick, state: AgentState) {
        self.state = state;
        self.state_since = tick;
        self.trace.push(TraceEntry {
            tick,
            participant_id: self.participant_id.clone(),
            event: TraceEvent::Enter { state: self.state.label() },
        });
    }

    /// Body pose for the current state.
    pub fn pose(&self, tick: Tick) -> PoseFrame {
        let (yaw, gesture_tag, speaking_hint) = match &self.state {
            AgentState::LookingAround => (self.idle_yaw(tick), GestureTag::None, false),
            AgentState::LookingAtSpeaker { target } => (self.yaw_towards(target), GestureTag::Nod, false),
            AgentState::RespondingTopic { .. } | AgentState::RespondingGeneric { .. } => {
                let yaw = self.respond_to.as_deref().map(|t| self.yaw_towards(t)).unwrap_or(self.home_yaw);
                let tag = match self.current_plan.as_ref().map(|p| &p.gesture) {
                    Some(Gesture::Shrug) => GestureTag::Shrug,
                    Some(Gesture::Wave) => GestureTag::Wave,
                    Some(Gesture::Point(_)) => GestureTag::Point,
                    Some(Gesture::HeadPoint) => GestureTag::HeadPoint,
                    _ => GestureTag::None,
                };
                (yaw, tag, true)
            }
        };
        PoseFrame {
            tick,
            participant_id: self.participant_id.clone(),
            position: self.position,
            yaw: normalize_yaw(yaw),
            gesture_tag,
            speaking_hint,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x100000001b3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::clients::{ClientError, LlmReply};
    use crate::agent::speaker::SpeakerEstimate;
    use proptest::prelude::*;

    pub(crate) fn agenda() -> Vec<AgendaItem> {
        let item = |id: &str, order, kws: &[&str]| AgendaItem {
            item_id: id.into(),
            label: id.into(),
            keywords: kws.iter().map(|s| s.to_string()).collect(),
            order,
        };
        vec![
            item("place", 0, &["place", "beach", "park"]),
            item("activity", 1, &["activity", "swimming", "hiking"]),
            item("food", 2, &["food", "eat", "pizza", "noodles"]),
        ]
    }

    pub(crate) fn lee() -> StandInConfig {
        let mut responses = BTreeMap::new();
        responses.insert("place".into(), ResponsePlan::new("I'm okay with any of them", Gesture::Shrug));
        responses.insert("activity".into(), ResponsePlan::new("I'm not good at swimming", Gesture::Wave));
        responses.insert("food".into(), ResponsePlan::new("I prefer beef noodles", Gesture::Point("beef noodles".into())));
        StandInConfig {
            absentee_id: "lee".into(),
            responses,
            fallback: ResponsePlan::new("Let me think about it, and I will get back to you later", Gesture::HeadPoint),
            addressing_names: vec!["Lee".into()],
        }
    }

    fn agent() -> Agent {
        Agent::spawn(lee(), agenda(), AgentParams::default(), [0.0, 0.0, 1.5], 7, 0)
    }

    fn heard(text: &str, tick: Tick) -> HeardUtterance {
        HeardUtterance {
            utterance: UtteranceEvent { start_tick: tick.saturating_sub(100), end_tick: tick, speaker_id: "a".into(), text: text.into(), addressed_to: None },
            speaker_pose: None,
        }
    }

    fn positions() -> BTreeMap<String, [f32; 3]> {
        [("a".to_string(), [-1.0, 0.0, 0.0]), ("b".to_string(), [1.0, 0.0, 0.0])].into_iter().collect()
    }

    fn labels(agent: &Agent) -> Vec<StateLabel> {
        agent
            .trace()
            .iter()
            .filter_map(|e| match &e.event {
                TraceEvent::Enter { state } => Some(state.clone()),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn spawns_looking_around() {
        let mut a = agent();
        assert_eq!(a.state(), &AgentState::LookingAround);
        let action = a.step(0, StepInputs::default());
        assert!(matches!(action, AgentAction::IdleGaze { .. }));
    }

    #[test]
    fn speech_then_silence() {
        let mut a = agent();
        let mut est = SpeakerEstimate::default();
        for t in 0..110 {
            let rms = if t < 50 { 0.3 } else { 0.0 };
            let levels = [("a".to_string(), rms), ("b".to_string(), 0.0)].into_iter().collect();
            est.observe(t, &levels);
            a.step(t, StepInputs { active_speaker: est.active.clone(), silent_ticks: est.silent_ticks(), positions: positions(), ..Default::default() });
        }
        assert_eq!(
            labels(&a),
            vec![StateLabel::LookingAround, StateLabel::LookingAtSpeaker("a".into()), StateLabel::LookingAround]
        );
        let entered = a.trace().iter().map(|e| e.tick).collect::<Vec<_>>();
        assert_eq!(entered, vec![0, 35, 97]);
    }

    #[test]
    fn topic_question_gets_one_plan() {
        let mut a = agent();
        let mut plans = 0;
        let mut responding_ticks = 0;
        for t in 0..400 {
            let utterances = if t == 10 { vec![heard("Hey Lee, what food do you prefer?", 10)] } else { vec![] };
            let speaker = if t < 10 { Some("a".to_string()) } else { None };
            let action = a.step(t, StepInputs { active_speaker: speaker, utterances, positions: positions(), ..Default::default() });
            if let AgentAction::SpeakPlan { plan, start_tick, .. } = &action {
                plans += 1;
                assert_eq!(plan.text, "I prefer beef noodles");
                assert_eq!(plan.gesture, Gesture::Point("beef noodles".into()));
                assert_eq!(*start_tick, 10);
                assert_eq!(a.pose(t).gesture_tag, GestureTag::Point);
            }
            if a.state().is_responding() {
                responding_ticks += 1;
            }
        }
        assert_eq!(plans, 1);
        assert_eq!(responding_ticks, 116);
        assert_eq!(
            labels(&a),
            vec![
                StateLabel::LookingAround,
                StateLabel::LookingAtSpeaker("a".into()),
                StateLabel::RespondingTopic("food".into()),
                StateLabel::LookingAround
            ]
        );
    }

    #[test]
    fn other_question_defers() {
        let plan = plan_response(&Classification::Other, &lee(), &agenda(), &Responder::Rules, &[], &AgentParams::default());
        assert_eq!(plan.plan.text, "Let me think about it, and I will get back to you later");
        assert_eq!(plan.plan.gesture, Gesture::HeadPoint);
    }

    #[test]
    fn queue_is_bounded_and_fifo() {
        let mut a = agent();
        a.step(0, StepInputs { utterances: vec![heard("Lee, beach?", 0)], ..Default::default() });
        let burst: Vec<_> = ["Lee, pizza?", "Lee, hiking?", "Lee, park?", "Lee, noodles?", "Lee, how are you?"]
            .iter()
            .map(|t| heard(t, 1))
            .collect();
        a.step(1, StepInputs { utterances: burst, ..Default::default() });
        assert_eq!(a.queue_len(), 4);
        assert_eq!(a.queue_dropped, 1);
        let mut texts = Vec::new();
        for t in 2..3000 {
            if let AgentAction::SpeakPlan { plan, .. } = a.step(t, StepInputs::default()) {
                texts.push(plan.text);
            }
        }
        assert_eq!(
            texts,
            vec![
                "I'm not good at swimming",
                "I'm okay with any of them",
                "I prefer beef noodles",
                "Let me think about it, and I will get back to you later"
            ]
        );
    }

    #[test]
    fn proactive_interjection_is_opt_in() {
        let run = |proactive: bool| {
            let params = AgentParams { proactive, ..Default::default() };
            let mut a = Agent::spawn(lee(), agenda(), params, [0.0, 0.0, 1.5], 1, 0);
            let mut spoke = None;
            for t in 0..200 {
                let utterances = if t == 5 { vec![heard("we could eat pizza or noodles", 5)] } else { vec![] };
                if let AgentAction::SpeakPlan { .. } = a.step(t, StepInputs { utterances, silent_ticks: t.saturating_sub(5), ..Default::default() }) {
                    spoke = Some(t);
                }
            }
            spoke
        };
        assert_eq!(run(false), None);
        assert_eq!(run(true), Some(77));
    }

    struct Echo(Result<LlmReply, ClientError>);
    impl LlmClient for Echo {
        fn complete(&self, _: &LlmRequest) -> Result<LlmReply, ClientError> {
            self.0.clone()
        }
    }

    fn profile() -> ParticipantProfile {
        ParticipantProfile {
            participant_id: "lee".into(),
            display_name: "Lee".into(),
            background: "Student".into(),
            personality: "Easygoing".into(),
            voice_sample_ref: None,
        }
    }

    #[test]
    fn llm_text_replaces_configured_words() {
        let responder = Responder::Llm { client: Arc::new(Echo(Ok(LlmReply { text: "Noodles please".into() }))), profile: profile() };
        let topic = Classification::Topic { item_id: "food".into(), score: 1 };
        let p = plan_response(&topic, &lee(), &agenda(), &responder, &[], &AgentParams::default());
        assert_eq!(p.plan.text, "Noodles please");
        assert_eq!(p.plan.gesture, Gesture::Point("beef noodles".into()));
        assert_eq!(p.plan.nominal_duration_ticks, 58);
        let p = plan_response(&Classification::Other, &lee(), &agenda(), &responder, &[], &AgentParams::default());
        assert_eq!(p.plan.gesture, Gesture::HeadPoint);
    }

    #[test]
    fn llm_failure_falls_back() {
        let responder = Responder::Llm { client: Arc::new(Echo(Err(ClientError::Transport("down".into())))), profile: profile() };
        let topic = Classification::Topic { item_id: "place".into(), score: 1 };
        let p = plan_response(&topic, &lee(), &agenda(), &responder, &[], &AgentParams::default());
        assert_eq!(p.plan.text, "I'm okay with any of them");
        assert!(p.degradation.is_some());
    }

    #[test]
    fn prompt_carries_profile_and_recent_history() {
        let history: Vec<_> = (0..15)
            .map(|i| UtteranceEvent { start_tick: i, end_tick: i, speaker_id: "a".into(), text: format!("line {i}"), addressed_to: None })
            .collect();
        let req = build_llm_prompt(&profile(), &lee(), &agenda(), &history);
        assert!(req.system.contains("Student") && req.system.contains("Easygoing"));
        assert!(req.system.contains("food: I prefer beef noodles"));
        assert_eq!(req.messages.len(), 10);
        assert_eq!(req.messages[0].content, "a: line 5");
    }

    #[derive(Debug, Clone)]
    enum Input {
        Speaker(Option<u8>),
        Say(u8, bool),
    }

    fn input() -> impl Strategy<Value = Input> {
        prop_oneof![
            4 => proptest::option::of(0u8..3).prop_map(Input::Speaker),
            1 => (0u8..6, any::<bool>()).prop_map(|(w, n)| Input::Say(w, n)),
        ]
    }

    proptest! {
        #[test]
        fn never_stuck_in_response(inputs in proptest::collection::vec(input(), 1..600)) {
            let texts = ["pizza", "beach", "hiking", "hello", "noodles and eat", "park"];
            let mut a = agent();
            let mut plans = 0usize;
            let mut addressed = 0usize;
            let mut speaker = None;
            for (t, inp) in inputs.iter().enumerate() {
                let t = t as Tick;
                let mut utterances = vec![];
                match inp {
                    Input::Speaker(s) => speaker = s.map(|i| ["a", "b", "c"][i as usize].to_string()),
                    Input::Say(w, named) => {
                        let text = if *named { format!("Lee {}", texts[*w as usize]) } else { texts[*w as usize].to_string() };
                        if *named { addressed += 1; }
                        utterances.push(heard(&text, t));
                    }
                }
                let action = a.step(t, StepInputs { active_speaker: speaker.clone(), utterances, ..Default::default() });
                if matches!(action, AgentAction::SpeakPlan { .. }) { plans += 1; }
                match a.state() {
                    AgentState::RespondingTopic { remaining_ticks, .. } | AgentState::RespondingGeneric { remaining_ticks } => {
                        prop_assert!(*remaining_ticks > 0)
                    }
                    _ => {}
                }
                prop_assert!(a.queue_len() <= 4);
            }
            prop_assert_eq!(plans + a.queue_len() + a.queue_dropped as usize, addressed);
        }
    }
}
