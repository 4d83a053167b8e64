//! Hostless meeting room: relays events among joined clients, runs stand-ins
//! once per tick and feeds every accepted event to the recorder.
//!
//! Stand-ins perceive the room with a delay equal to the late window. By the
//! time tick `t` is perceived, every event for `t` has either arrived or been
//! dropped as late, so agent behaviour does not depend on network jitter.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    synthesize_speech, Agent, AgentAction, AgentParams, AudioRates, HeardUtterance, LlmClient, Responder, SpeakerEstimate,
    StepInputs, TraceEntry, TtsClient,
};
use crate::events::{compute_rms, samples_for_tick, AudioChunk, PoseFrame, RecordedEvent, UtteranceEvent};
use crate::model::{LookupError, Meeting, Role, StandInConfig, Tick, DEFAULT_SAMPLE_RATE, DEFAULT_TICK_RATE};
use crate::protocol::{Bye, Hello, Message, RosterEntry, RosterUpdate, StandinAction, Welcome};
use crate::recorder::{open_writer, RecorderError, RecordingManifest, Writer};

pub const DEFAULT_LATE_WINDOW: u64 = 18;
/// How far back pose history is kept for facing checks at utterance start.
const POSE_HISTORY_TICKS: u64 = 72 * 120;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("setup error: {0}")]
    Setup(String),
    #[error(transparent)]
    Lookup(#[from] LookupError),
    #[error("{0} already joined")]
    AlreadyJoined(String),
    #[error("{0} is an absentee in this iteration and cannot join live")]
    Role(String),
    #[error("unknown sender {0}")]
    UnknownSender(String),
    #[error("session is closed")]
    Closed,
    #[error(transparent)]
    Recorder(#[from] RecorderError),
}

impl SessionError {
    /// Short machine-readable code for wire `error` messages.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::Setup(_) => "setup",
            SessionError::Lookup(_) => "lookup",
            SessionError::AlreadyJoined(_) => "already_joined",
            SessionError::Role(_) => "role",
            SessionError::UnknownSender(_) => "unknown_sender",
            SessionError::Closed => "closed",
            SessionError::Recorder(_) => "recorder",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounters {
    pub late: u64,
    pub early: u64,
    pub duplicate: u64,
    pub malformed: u64,
}

impl DropCounters {
    pub fn total(&self) -> u64 {
        self.late + self.early + self.duplicate + self.malformed
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Recipient {
    All,
    AllExcept(String),
    Only(String),
}

impl Recipient {
    pub fn includes(&self, participant_id: &str) -> bool {
        match self {
            Recipient::All => true,
            Recipient::AllExcept(p) => p != participant_id,
            Recipient::Only(p) => p == participant_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: Recipient,
    pub message: Message,
}

#[derive(Clone)]
pub struct SessionOptions {
    pub tick_rate: u32,
    pub sample_rate: u32,
    pub late_window: u64,
    pub agent: AgentParams,
    /// Room positions of stand-ins; unlisted stand-ins stand at the origin.
    pub standin_positions: BTreeMap<String, [f32; 3]>,
    pub llm: Option<Arc<dyn LlmClient>>,
    pub tts: Option<Arc<dyn TtsClient>>,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            tick_rate: DEFAULT_TICK_RATE,
            sample_rate: DEFAULT_SAMPLE_RATE,
            late_window: DEFAULT_LATE_WINDOW,
            agent: AgentParams::default(),
            standin_positions: BTreeMap::new(),
            llm: None,
            tts: None,
        }
    }
}

impl std::fmt::Debug for SessionOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionOptions")
            .field("tick_rate", &self.tick_rate)
            .field("sample_rate", &self.sample_rate)
            .field("late_window", &self.late_window)
            .field("llm", &self.llm.is_some())
            .field("tts", &self.tts.is_some())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connection {
    Connected,
    Left,
}

struct StandIn {
    agent: Agent,
    estimate: SpeakerEstimate,
    voice_ref: Option<String>,
    speech: VecDeque<AudioChunk>,
}

/// One live iteration of a meeting.
pub struct Session {
    meeting: Meeting,
    iteration_index: u32,
    options: SessionOptions,
    current_tick: Tick,
    roster: BTreeMap<String, (RosterEntry, Connection)>,
    standins: Vec<StandIn>,
    writer: Option<Writer>,
    recording_dir: PathBuf,
    manifest: Option<RecordingManifest>,
    drops: DropCounters,
    seen: BTreeSet<(u8, String, Tick)>,
    pending_rms: BTreeMap<Tick, BTreeMap<String, f32>>,
    pending_utterances: Vec<UtteranceEvent>,
    pose_history: BTreeMap<String, BTreeMap<Tick, PoseFrame>>,
    settled_positions: BTreeMap<String, [f32; 3]>,
    degradations: Vec<String>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("meeting_id", &self.meeting.meeting_id)
            .field("iteration_index", &self.iteration_index)
            .field("current_tick", &self.current_tick)
            .field("drops", &self.drops)
            .finish()
    }
}

impl Session {
    /// Opens the room at tick 0 and spawns one stand-in per config.
    pub fn create(
        meeting: Meeting,
        iteration_index: u32,
        standin_configs: Vec<StandInConfig>,
        seed: u64,
        recordings_dir: &Path,
        options: SessionOptions,
    ) -> Result<Self, SessionError> {
        if options.tick_rate == 0 || options.sample_rate == 0 {
            return Err(SessionError::Setup("tick_rate and sample_rate must be positive".into()));
        }
        let mut roster = BTreeMap::new();
        let mut standins = Vec::new();
        for config in standin_configs {
            let id = config.absentee_id.clone();
            if meeting.role_of(&id, iteration_index)? != Role::Absentee {
                return Err(SessionError::Setup(format!("{id} attends iteration {iteration_index} and cannot have a stand-in")));
            }
            if roster.contains_key(&id) {
                return Err(SessionError::Setup(format!("two stand-in configs for {id}")));
            }
            let profile = meeting.participant(&id).cloned().expect("role_of found the participant");
            let position = options.standin_positions.get(&id).copied().unwrap_or([0.0; 3]);
            let mut params = options.agent.clone();
            params.tick_rate = options.tick_rate;
            let estimate = SpeakerEstimate::new(params.speaker);
            let mut agent = Agent::spawn(config, meeting.agenda.clone(), params, position, seed, 0);
            if let Some(llm) = &options.llm {
                agent = agent.with_responder(Responder::Llm { client: llm.clone(), profile: profile.clone() });
            }
            let entry = RosterEntry { participant_id: id.clone(), display_name: profile.display_name.clone(), standin: true };
            roster.insert(id, (entry, Connection::Connected));
            standins.push(StandIn { agent, estimate, voice_ref: profile.voice_sample_ref.clone(), speech: VecDeque::new() });
        }
        standins.sort_by(|a, b| a.agent.participant_id.cmp(&b.agent.participant_id));

        let entries: Vec<RosterEntry> = roster.values().map(|(e, _)| e.clone()).collect();
        let writer = open_writer(
            recordings_dir,
            &meeting.meeting_id,
            iteration_index,
            &entries,
            options.tick_rate,
            options.sample_rate,
        )?;
        let recording_dir = writer.dir().to_path_buf();
        let mut pose_history = BTreeMap::new();
        let mut settled_positions = BTreeMap::new();
        for s in &standins {
            pose_history.insert(s.agent.participant_id.clone(), BTreeMap::new());
            settled_positions.insert(s.agent.participant_id.clone(), s.agent.position);
        }
        Ok(Self {
            meeting,
            iteration_index,
            options,
            current_tick: 0,
            roster,
            standins,
            writer: Some(writer),
            recording_dir,
            manifest: None,
            drops: DropCounters::default(),
            seen: BTreeSet::new(),
            pending_rms: BTreeMap::new(),
            pending_utterances: Vec::new(),
            pose_history,
            settled_positions,
            degradations: Vec::new(),
        })
    }

    pub fn meeting(&self) -> &Meeting {
        &self.meeting
    }

    pub fn iteration_index(&self) -> u32 {
        self.iteration_index
    }

    pub fn tick_rate(&self) -> u32 {
        self.options.tick_rate
    }

    pub fn current_tick(&self) -> Tick {
        self.current_tick
    }

    pub fn drop_counters(&self) -> DropCounters {
        self.drops
    }

    pub fn recording_dir(&self) -> &Path {
        &self.recording_dir
    }

    pub fn is_closed(&self) -> bool {
        self.manifest.is_some()
    }

    pub fn roster(&self) -> Vec<RosterEntry> {
        self.roster.values().filter(|(_, c)| *c == Connection::Connected).map(|(e, _)| e.clone()).collect()
    }

    pub fn connection(&self, participant_id: &str) -> Option<Connection> {
        self.roster.get(participant_id).map(|(_, c)| *c)
    }

    /// Merged trace of every stand-in, ordered by tick then participant.
    pub fn agent_trace(&self) -> Vec<TraceEntry> {
        let mut all: Vec<TraceEntry> = self.standins.iter().flat_map(|s| s.agent.trace().iter().cloned()).collect();
        all.sort_by(|a, b| (a.tick, &a.participant_id).cmp(&(b.tick, &b.participant_id)));
        all
    }

    pub fn degradations(&self) -> Vec<String> {
        let mut out = self.degradations.clone();
        for s in &self.standins {
            out.extend(s.agent.degradations().iter().cloned());
        }
        out
    }

    pub fn agent(&self, participant_id: &str) -> Option<&Agent> {
        self.standins.iter().find(|s| s.agent.participant_id == participant_id).map(|s| &s.agent)
    }

    pub fn join(&mut self, hello: Hello) -> Result<(Welcome, Vec<Outbound>), SessionError> {
        if self.is_closed() {
            return Err(SessionError::Closed);
        }
        let id = hello.participant_id.clone();
        if self.meeting.role_of(&id, self.iteration_index)? == Role::Absentee {
            return Err(SessionError::Role(id));
        }
        if self.roster.get(&id).is_some_and(|(_, c)| *c == Connection::Connected) {
            return Err(SessionError::AlreadyJoined(id));
        }
        let entry = RosterEntry { participant_id: id.clone(), display_name: hello.display_name, standin: false };
        self.writer.as_mut().expect("open session has a writer").add_participant(entry.clone())?;
        self.roster.insert(id.clone(), (entry, Connection::Connected));
        self.pose_history.entry(id.clone()).or_default();
        let roster = self.roster();
        let welcome = Welcome { tick_rate: self.options.tick_rate, current_tick: self.current_tick, roster: roster.clone() };
        Ok((welcome, vec![Outbound { to: Recipient::AllExcept(id), message: Message::RosterUpdate(RosterUpdate { roster }) }]))
    }

    pub fn leave(&mut self, participant_id: &str) -> Vec<Outbound> {
        match self.roster.get_mut(participant_id) {
            Some((entry, c)) if !entry.standin && *c == Connection::Connected => {
                *c = Connection::Left;
                vec![Outbound { to: Recipient::All, message: Message::RosterUpdate(RosterUpdate { roster: self.roster() }) }]
            }
            _ => Vec::new(),
        }
    }

    fn drop_event(&mut self, what: &str, reason: &str, sender: &str, tick: Tick) -> Vec<Outbound> {
        warn!("dropped {what} from {sender} at tick {tick}: {reason} (current {})", self.current_tick);
        Vec::new()
    }

    fn window_check(&mut self, tick: Tick) -> Result<(), &'static str> {
        let lo = self.current_tick.saturating_sub(self.options.late_window);
        if tick < lo {
            self.drops.late += 1;
            Err("late")
        } else if tick > self.current_tick + 1 {
            self.drops.early += 1;
            Err("early")
        } else {
            Ok(())
        }
    }

    /// Accepts one event from a joined human. Out-of-window, duplicate and
    /// malformed events are dropped and counted; only an unknown sender errors.
    pub fn ingest(&mut self, sender: &str, message: Message) -> Result<Vec<Outbound>, SessionError> {
        if self.is_closed() {
            return Err(SessionError::Closed);
        }
        match self.roster.get(sender) {
            Some((entry, Connection::Connected)) if !entry.standin => {}
            _ => return Err(SessionError::UnknownSender(sender.to_string())),
        }
        let event = match message {
            Message::Pose(p) => RecordedEvent::Pose(p),
            Message::Audio(a) => RecordedEvent::Audio(a),
            Message::Utterance(u) => RecordedEvent::Utterance(u),
            Message::Bye(_) => return Ok(self.leave(sender)),
            other => {
                self.drops.malformed += 1;
                return Ok(self.drop_event(other.type_name(), "not an event", sender, self.current_tick));
            }
        };
        if event.participant_id() != sender {
            self.drops.malformed += 1;
            return Ok(self.drop_event("event", "participant id does not match sender", sender, event.tick()));
        }
        if let Err(reason) = self.validate(&event) {
            self.drops.malformed += 1;
            return Ok(self.drop_event("event", reason, sender, event.tick()));
        }
        if let Err(reason) = self.window_check(event.last_tick()) {
            return Ok(self.drop_event("event", reason, sender, event.tick()));
        }
        let key = match &event {
            RecordedEvent::Pose(p) => Some((0u8, p.participant_id.clone(), p.tick)),
            RecordedEvent::Audio(a) => Some((1u8, a.participant_id.clone(), a.tick)),
            RecordedEvent::Utterance(_) => None,
        };
        if let Some(k) = key {
            if !self.seen.insert(k) {
                self.drops.duplicate += 1;
                return Ok(self.drop_event("event", "duplicate", sender, event.tick()));
            }
        }
        self.accept(&event)?;
        Ok(vec![Outbound { to: Recipient::AllExcept(sender.to_string()), message: to_message(event) }])
    }

    fn validate(&self, event: &RecordedEvent) -> Result<(), &'static str> {
        match event {
            RecordedEvent::Pose(p) if !p.is_valid() => Err("pose out of range"),
            RecordedEvent::Audio(a) => {
                if !(a.rms.is_finite() && a.rms >= 0.0) {
                    return Err("bad rms");
                }
                if let Some(pcm) = &a.pcm {
                    if pcm.len() != samples_for_tick(a.tick, self.options.sample_rate, self.options.tick_rate) {
                        return Err("wrong sample count");
                    }
                    if (compute_rms(pcm) - a.rms).abs() > 1e-3 {
                        return Err("rms inconsistent with pcm");
                    }
                }
                Ok(())
            }
            RecordedEvent::Utterance(u) if u.text.trim().is_empty() || u.end_tick < u.start_tick => Err("bad utterance"),
            _ => Ok(()),
        }
    }

    /// Records the event and buffers it for stand-in perception.
    fn accept(&mut self, event: &RecordedEvent) -> Result<(), SessionError> {
        self.writer.as_mut().expect("open session has a writer").append(event)?;
        match event {
            RecordedEvent::Pose(p) => {
                self.pose_history.entry(p.participant_id.clone()).or_default().insert(p.tick, p.clone());
            }
            RecordedEvent::Audio(a) => {
                self.pending_rms.entry(a.tick).or_default().insert(a.participant_id.clone(), a.rms);
            }
            RecordedEvent::Utterance(u) => self.pending_utterances.push(u.clone()),
        }
        Ok(())
    }

    /// Settles the perceived tick and returns the utterances that became final with it.
    fn settle(&mut self, settled: Tick) -> (BTreeMap<String, f32>, Vec<UtteranceEvent>) {
        let rms = self.pending_rms.remove(&settled).unwrap_or_default();
        let stale: Vec<Tick> = self.pending_rms.range(..settled).map(|(t, _)| *t).collect();
        for t in stale {
            self.pending_rms.remove(&t);
        }
        for (pid, hist) in &mut self.pose_history {
            if let Some(p) = hist.get(&settled) {
                self.settled_positions.insert(pid.clone(), p.position);
            }
            let cutoff = settled.saturating_sub(POSE_HISTORY_TICKS);
            let keep_from = hist.range(..cutoff).next_back().map(|(t, _)| *t).unwrap_or(cutoff);
            *hist = hist.split_off(&keep_from);
        }
        let (mut ready, rest): (Vec<_>, Vec<_>) = self.pending_utterances.drain(..).partition(|u| u.end_tick <= settled);
        self.pending_utterances = rest;
        ready.sort_by(|a, b| (a.end_tick, a.start_tick, &a.speaker_id).cmp(&(b.end_tick, b.start_tick, &b.speaker_id)));
        (rms, ready)
    }

    /// Runs every stand-in for the current tick, records and returns their
    /// output, then advances the clock.
    pub fn tick(&mut self) -> Result<Vec<Outbound>, SessionError> {
        if self.is_closed() {
            return Err(SessionError::Closed);
        }
        let now = self.current_tick;
        let perceived = now.checked_sub(self.options.late_window);
        let (rms, heard) = match perceived {
            Some(s) => self.settle(s),
            None => (BTreeMap::new(), Vec::new()),
        };

        let mut produced: Vec<(RecordedEvent, Option<StandinAction>)> = Vec::new();
        let rates = AudioRates { tick_rate: self.options.tick_rate, sample_rate: self.options.sample_rate };
        for i in 0..self.standins.len() {
            let id = self.standins[i].agent.participant_id.clone();
            if let Some(s) = perceived {
                let mut own_excluded = rms.clone();
                own_excluded.remove(&id);
                self.standins[i].estimate.observe(s, &own_excluded);
            }
            let utterances = heard
                .iter()
                .map(|u| HeardUtterance {
                    utterance: u.clone(),
                    speaker_pose: self
                        .pose_history
                        .get(&u.speaker_id)
                        .and_then(|h| h.range(..=u.start_tick).next_back().map(|(_, p)| p.clone())),
                })
                .collect();
            let inputs = StepInputs {
                active_speaker: self.standins[i].estimate.active.clone(),
                silent_ticks: self.standins[i].estimate.silent_ticks(),
                utterances,
                positions: self.settled_positions.clone(),
            };
            let standin = &mut self.standins[i];
            let action = standin.agent.step(now, inputs);
            produced.push((RecordedEvent::Pose(standin.agent.pose(now)), None));
            if let AgentAction::SpeakPlan { plan, start_tick, addressed_to } = &action {
                let out = synthesize_speech(
                    plan,
                    &id,
                    *start_tick,
                    standin.voice_ref.as_deref(),
                    self.options.tts.as_ref(),
                    standin.agent.params().client_deadline,
                    rates,
                );
                if let Some(d) = out.degradation {
                    self.degradations.push(format!("{id}: {d}"));
                }
                standin.speech = out.chunks.into();
                let end = start_tick + plan.nominal_duration_ticks.max(1) - 1;
                let utt = UtteranceEvent {
                    start_tick: *start_tick,
                    end_tick: end,
                    speaker_id: id.clone(),
                    text: plan.text.clone(),
                    addressed_to: Some(addressed_to.clone()),
                };
                let act = StandinAction { tick: now, participant_id: id.clone(), action: action.clone() };
                produced.push((RecordedEvent::Utterance(utt), Some(act)));
            }
            while standin.speech.front().is_some_and(|c| c.tick < now) {
                standin.speech.pop_front();
            }
            if standin.speech.front().is_some_and(|c| c.tick == now) {
                let chunk = standin.speech.pop_front().expect("checked");
                produced.push((RecordedEvent::Audio(chunk), None));
            }
        }

        let mut out = Vec::new();
        for (event, action) in produced {
            self.accept(&event)?;
            if let Some(a) = action {
                out.push(Outbound { to: Recipient::All, message: Message::StandinAction(a) });
            }
            out.push(Outbound { to: Recipient::All, message: to_message(event) });
        }
        self.current_tick += 1;
        Ok(out)
    }

    /// Finalizes the recording. Closing again returns the same manifest.
    pub fn close(&mut self) -> Result<(RecordingManifest, Vec<Outbound>), SessionError> {
        if let Some(m) = &self.manifest {
            return Ok((m.clone(), Vec::new()));
        }
        let writer = self.writer.take().expect("open session has a writer");
        let manifest = writer.finalize()?;
        self.manifest = Some(manifest.clone());
        let bye = Message::Bye(Bye { participant_id: None, reason: Some("session closed".into()) });
        Ok((manifest, vec![Outbound { to: Recipient::All, message: bye }]))
    }
}

fn to_message(event: RecordedEvent) -> Message {
    match event {
        RecordedEvent::Pose(p) => Message::Pose(p),
        RecordedEvent::Audio(a) => Message::Audio(a),
        RecordedEvent::Utterance(u) => Message::Utterance(u),
    }
}
