//! First-person playback of a recording, comment capture, and the two
//! timeline transforms built on top: splicing and abridging.

mod abridge;
mod splice;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use abridge::{
    abridge, load_chain, write_abridged, AbridgedTimeline, ExtractiveSummarizer, LlmSummarizer, Segment, Summarizer,
};
pub use splice::{listening_frames, splice, splice_reference, SpliceOptions, SplicePlan};

use crate::agent::{bearing, speech::chunk_stream, synthesize_speech, AudioRates, TtsClient};
use crate::events::{fit_samples, samples_for_tick, AudioChunk, GestureTag, PoseFrame, RecordedEvent, UtteranceEvent};
use crate::model::{Gesture, ResponsePlan, Tick};
use crate::recorder::{RecorderError, Recording};

pub const LISTENING_NOD_PERIOD: u64 = 36;

#[derive(Debug, Error)]
pub enum PlaybackError {
    #[error("unknown viewpoint {0}")]
    UnknownViewpoint(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("empty contribution")]
    EmptyContribution,
    #[error("invalid contribution: {0}")]
    InvalidContribution(String),
    #[error("{0} attended iteration {1} and cannot contribute to it")]
    AuthorRole(String, u32),
    #[error("broken iteration chain: {0}")]
    Chain(String),
    #[error(transparent)]
    Recorder(#[from] RecorderError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Mode {
    Playing,
    Paused,
    Commenting { start_tick: Tick },
}

/// A comment recorded during playback, in ticks local to the comment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub contribution_id: String,
    pub author_id: String,
    pub anchor_tick: Tick,
    /// Creation order among contributions sharing an anchor.
    #[serde(default)]
    pub created_seq: u64,
    pub frames: Vec<PoseFrame>,
    pub audio: Vec<AudioChunk>,
    pub utterances: Vec<UtteranceEvent>,
    pub duration_ticks: Tick,
}

impl Contribution {
    /// Builds a contribution from captured events on any clock: ticks are
    /// re-based so the earliest event lands on local tick 0.
    pub fn from_capture(
        contribution_id: impl Into<String>,
        author_id: &str,
        anchor_tick: Tick,
        created_seq: u64,
        captured: Vec<RecordedEvent>,
        rates: AudioRates,
    ) -> Result<Self, PlaybackError> {
        let origin = captured.iter().map(|e| e.tick()).min().ok_or(PlaybackError::EmptyContribution)?;
        let end = captured.iter().map(|e| e.last_tick()).max().expect("non-empty");
        let mut c = Contribution {
            contribution_id: contribution_id.into(),
            author_id: author_id.to_string(),
            anchor_tick,
            created_seq,
            frames: Vec::new(),
            audio: Vec::new(),
            utterances: Vec::new(),
            duration_ticks: end - origin + 1,
        };
        for e in captured {
            if e.participant_id() != author_id {
                return Err(PlaybackError::InvalidContribution(format!(
                    "event from {} in a comment by {author_id}",
                    e.participant_id()
                )));
            }
            match e.shifted(-(origin as i64)) {
                RecordedEvent::Pose(p) => c.frames.push(p),
                RecordedEvent::Audio(mut a) => {
                    if let Some(pcm) = &a.pcm {
                        a.pcm = Some(fit_samples(pcm, samples_for_tick(a.tick, rates.sample_rate, rates.tick_rate)));
                    }
                    c.audio.push(a)
                }
                RecordedEvent::Utterance(u) => c.utterances.push(u),
            }
        }
        c.validate(rates)?;
        Ok(c)
    }

    /// Builds a contribution from a spoken clip and/or typed text. Text without
    /// audio is voiced with the offline placeholder at the speaking rate.
    #[allow(clippy::too_many_arguments)]
    pub fn from_media(
        contribution_id: impl Into<String>,
        author_id: &str,
        anchor_tick: Tick,
        created_seq: u64,
        samples: Option<&[i16]>,
        text: Option<&str>,
        position: [f32; 3],
        yaw: f32,
        tts: Option<&Arc<dyn TtsClient>>,
        rates: AudioRates,
    ) -> Result<Self, PlaybackError> {
        let text = text.map(str::trim).filter(|t| !t.is_empty());
        let (audio, duration) = match (samples, text) {
            (Some(s), _) if !s.is_empty() => {
                let ticks = (s.len() as u64 * rates.tick_rate as u64).div_ceil(rates.sample_rate as u64);
                (chunk_stream(author_id, 0, ticks, s, rates), ticks)
            }
            (_, Some(t)) => {
                let plan = ResponsePlan::with_rate(t, Gesture::None, crate::model::DEFAULT_WORDS_PER_MINUTE, rates.tick_rate);
                let out = synthesize_speech(&plan, author_id, 0, None, tts, std::time::Duration::from_millis(2000), rates);
                let ticks = plan.nominal_duration_ticks;
                (out.chunks, ticks)
            }
            _ => return Err(PlaybackError::EmptyContribution),
        };
        if duration == 0 {
            return Err(PlaybackError::EmptyContribution);
        }
        let frames = (0..duration)
            .map(|t| PoseFrame {
                tick: t,
                participant_id: author_id.to_string(),
                position,
                yaw,
                gesture_tag: GestureTag::None,
                speaking_hint: true,
            })
            .collect();
        let utterances = text
            .map(|t| {
                vec![UtteranceEvent {
                    start_tick: 0,
                    end_tick: duration - 1,
                    speaker_id: author_id.to_string(),
                    text: t.to_string(),
                    addressed_to: None,
                }]
            })
            .unwrap_or_default();
        let c = Contribution {
            contribution_id: contribution_id.into(),
            author_id: author_id.to_string(),
            anchor_tick,
            created_seq,
            frames,
            audio,
            utterances,
            duration_ticks: duration,
        };
        c.validate(rates)?;
        Ok(c)
    }

    pub fn validate(&self, rates: AudioRates) -> Result<(), PlaybackError> {
        let bad = |m: String| Err(PlaybackError::InvalidContribution(m));
        if self.duration_ticks == 0 {
            return Err(PlaybackError::EmptyContribution);
        }
        if self.frames.iter().any(|f| !f.is_valid()) {
            return bad("pose out of range".into());
        }
        let ids = self
            .frames
            .iter()
            .map(|f| &f.participant_id)
            .chain(self.audio.iter().map(|a| &a.participant_id))
            .chain(self.utterances.iter().map(|u| &u.speaker_id));
        for id in ids {
            if *id != self.author_id {
                return bad(format!("event from {id} in a comment by {}", self.author_id));
            }
        }
        let ticks = self
            .frames
            .iter()
            .map(|f| f.tick)
            .chain(self.audio.iter().map(|a| a.tick))
            .chain(self.utterances.iter().map(|u| u.end_tick.max(u.start_tick)));
        for t in ticks {
            if t >= self.duration_ticks {
                return bad(format!("tick {t} outside duration {}", self.duration_ticks));
            }
        }
        for a in &self.audio {
            if let Some(pcm) = &a.pcm {
                if pcm.len() != samples_for_tick(a.tick, rates.sample_rate, rates.tick_rate) {
                    return bad(format!("audio chunk at local tick {} has {} samples", a.tick, pcm.len()));
                }
            }
        }
        Ok(())
    }

    pub fn events(&self) -> Vec<RecordedEvent> {
        let mut out: Vec<RecordedEvent> = self
            .frames
            .iter()
            .cloned()
            .map(RecordedEvent::Pose)
            .chain(self.audio.iter().cloned().map(RecordedEvent::Audio))
            .chain(self.utterances.iter().cloned().map(RecordedEvent::Utterance))
            .collect();
        crate::events::sort_events(&mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvatarView {
    pub participant_id: String,
    pub position: [f32; 3],
    pub yaw: f32,
    pub gesture_tag: GestureTag,
    pub speaking: bool,
    /// Tick of the frame shown, which may be earlier than the view tick.
    pub frame_tick: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioView {
    pub participant_id: String,
    pub rms: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<i16>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceView {
    #[serde(flatten)]
    pub utterance: UtteranceEvent,
    pub standin: bool,
    pub in_progress: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub tick: Tick,
    pub viewpoint: Option<String>,
    pub avatars: Vec<AvatarView>,
    pub audio: Vec<AudioView>,
    pub utterances: Vec<UtteranceView>,
}

/// The scene at `tick` as seen from `viewpoint` (`None` shows every avatar).
pub fn view_at(recording: &Recording, viewpoint: Option<&str>, tick: Tick, with_samples: bool) -> Result<View, PlaybackError> {
    let standins: Vec<&str> = recording.manifest.standins().collect();
    let audio_now: BTreeMap<&str, f32> = recording
        .audio_index()
        .iter()
        .filter(|a| a.tick == tick)
        .map(|a| (a.participant_id.as_str(), a.rms))
        .collect();
    let mut avatars = Vec::new();
    for id in recording.manifest.participant_ids() {
        if Some(id) == viewpoint {
            continue;
        }
        if let Some(p) = recording.pose_at(id, tick) {
            let loud = audio_now.get(id).is_some_and(|&r| r > crate::agent::SpeakerParams::default().threshold);
            avatars.push(AvatarView {
                participant_id: id.to_string(),
                position: p.position,
                yaw: p.yaw,
                gesture_tag: p.gesture_tag,
                speaking: p.speaking_hint || loud,
                frame_tick: p.tick,
            });
        }
    }
    let mut audio = Vec::new();
    for a in recording.audio_index().iter().filter(|a| a.tick == tick) {
        let samples =
            if with_samples && a.pcm { Some(recording.audio_samples(&a.participant_id, tick, tick + 1)?) } else { None };
        audio.push(AudioView { participant_id: a.participant_id.clone(), rms: a.rms, samples });
    }
    let utterances = recording
        .utterances()
        .iter()
        .filter(|u| u.start_tick <= tick && tick <= u.end_tick)
        .map(|u| UtteranceView {
            utterance: u.clone(),
            standin: standins.contains(&u.speaker_id.as_str()),
            in_progress: tick < u.end_tick,
        })
        .collect();
    Ok(View { tick, viewpoint: viewpoint.map(str::to_string), avatars, audio, utterances })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum SeekResult {
    Exact,
    Clamped { requested: Tick, to: Tick },
}

#[derive(Debug)]
pub struct PlaybackSession {
    recording: Arc<Recording>,
    viewpoint: Option<String>,
    cursor: Tick,
    mode: Mode,
    pending: Vec<Contribution>,
    next_seq: u64,
}

/// Opens a recording at tick 0, paused. `viewpoint` must be in the roster.
pub fn open_playback(recording: Arc<Recording>, viewpoint: Option<&str>) -> Result<PlaybackSession, PlaybackError> {
    if let Some(v) = viewpoint {
        if !recording.manifest.participant_ids().any(|p| p == v) {
            return Err(PlaybackError::UnknownViewpoint(v.to_string()));
        }
    }
    Ok(PlaybackSession {
        recording,
        viewpoint: viewpoint.map(str::to_string),
        cursor: 0,
        mode: Mode::Paused,
        pending: Vec::new(),
        next_seq: 0,
    })
}

impl PlaybackSession {
    pub fn recording(&self) -> &Arc<Recording> {
        &self.recording
    }

    pub fn viewpoint(&self) -> Option<&str> {
        self.viewpoint.as_deref()
    }

    pub fn cursor(&self) -> Tick {
        self.cursor
    }

    pub fn mode(&self) -> &Mode {
        &self.mode
    }

    pub fn pending_contributions(&self) -> &[Contribution] {
        &self.pending
    }

    pub fn take_contributions(&mut self) -> Vec<Contribution> {
        std::mem::take(&mut self.pending)
    }

    pub fn seek(&mut self, tick: Tick) -> SeekResult {
        let d = self.recording.duration_ticks();
        if tick > d {
            self.cursor = d;
            SeekResult::Clamped { requested: tick, to: d }
        } else {
            self.cursor = tick;
            SeekResult::Exact
        }
    }

    /// Starts playing unless already at the end or commenting.
    pub fn play(&mut self) {
        if self.mode == Mode::Paused && self.cursor < self.recording.duration_ticks() {
            self.mode = Mode::Playing;
        }
    }

    pub fn pause(&mut self) {
        if self.mode == Mode::Playing {
            self.mode = Mode::Paused;
        }
    }

    /// Moves the cursor while playing; pauses on reaching the end.
    /// Returns the number of ticks advanced.
    pub fn advance(&mut self, ticks: u64) -> u64 {
        if self.mode != Mode::Playing {
            return 0;
        }
        let d = self.recording.duration_ticks();
        let step = ticks.min(d - self.cursor);
        self.cursor += step;
        if self.cursor == d {
            self.mode = Mode::Paused;
        }
        step
    }

    pub fn view(&self) -> Result<View, PlaybackError> {
        view_at(&self.recording, self.viewpoint.as_deref(), self.cursor, true)
    }

    pub fn begin_comment(&mut self) -> Result<Tick, PlaybackError> {
        match self.mode {
            Mode::Commenting { .. } => Err(PlaybackError::State("already commenting".into())),
            _ => {
                self.mode = Mode::Commenting { start_tick: self.cursor };
                Ok(self.cursor)
            }
        }
    }

    /// Closes the comment and queues it. Captured ticks may use any clock.
    pub fn end_comment(&mut self, author_id: &str, captured: Vec<RecordedEvent>) -> Result<Contribution, PlaybackError> {
        let Mode::Commenting { start_tick } = self.mode else {
            return Err(PlaybackError::State("end_comment without begin_comment".into()));
        };
        let rates = AudioRates { tick_rate: self.recording.manifest.tick_rate, sample_rate: self.recording.manifest.audio_sample_rate };
        let seq = self.next_seq;
        let id = format!("{author_id}-{start_tick}-{seq}");
        let result = Contribution::from_capture(id, author_id, start_tick, seq, captured, rates);
        self.mode = Mode::Paused;
        let c = result?;
        self.next_seq += 1;
        self.pending.push(c.clone());
        Ok(c)
    }
}

/// Yaw from `from` towards `to`, or `fallback` when the points coincide.
pub(crate) fn facing(from: [f32; 3], to: [f32; 3], fallback: f32) -> f32 {
    if from[0] == to[0] && from[2] == to[2] {
        fallback
    } else {
        bearing(from, to)
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::protocol::RosterEntry;
    use crate::recorder::{load, open_writer};
    use std::path::Path;

    pub fn roster(ids: &[&str], standins: &[&str]) -> Vec<RosterEntry> {
        ids.iter()
            .map(|id| RosterEntry { participant_id: id.to_string(), display_name: id.to_string(), standin: standins.contains(id) })
            .collect()
    }

    pub fn pose(tick: Tick, pid: &str, pos: [f32; 3]) -> PoseFrame {
        PoseFrame { tick, participant_id: pid.into(), position: pos, yaw: 0.0, gesture_tag: GestureTag::None, speaking_hint: false }
    }

    /// a and b talk for `duration` ticks while lee's stand-in listens.
    pub fn small_recording(base: &Path, duration: Tick) -> Recording {
        let mut w = open_writer(base, "m", 1, &roster(&["a", "b", "lee"], &["lee"]), 72, 48_000).unwrap();
        for t in 0..duration {
            w.append(&RecordedEvent::Pose(pose(t, "a", [-1.0, 0.0, 0.0]))).unwrap();
            w.append(&RecordedEvent::Pose(pose(t, "b", [1.0, 0.0, 0.0]))).unwrap();
            w.append(&RecordedEvent::Pose(pose(t, "lee", [0.0, 0.0, 1.5]))).unwrap();
            let pcm = vec![(t % 100) as i16; samples_for_tick(t, 48_000, 72)];
            let rms = crate::events::compute_rms(&pcm);
            w.append(&RecordedEvent::Audio(AudioChunk { tick: t, participant_id: "a".into(), rms, pcm: Some(pcm) })).unwrap();
        }
        w.append(&RecordedEvent::Utterance(UtteranceEvent {
            start_tick: 10,
            end_tick: 20,
            speaker_id: "a".into(),
            text: "where should we go".into(),
            addressed_to: None,
        }))
        .unwrap();
        let dir = w.dir().to_path_buf();
        w.finalize().unwrap();
        load(&dir).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn viewpoint_is_excluded() {
        let tmp = tempfile::tempdir().unwrap();
        let rec = Arc::new(small_recording(tmp.path(), 100));
        let s = open_playback(rec.clone(), Some("lee")).unwrap();
        assert_eq!(s.cursor(), 0);
        assert_eq!(s.mode(), &Mode::Paused);
        let ids: Vec<_> = s.view().unwrap().avatars.iter().map(|a| a.participant_id.clone()).collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert!(matches!(open_playback(rec.clone(), Some("nobody")), Err(PlaybackError::UnknownViewpoint(_))));
        let all = open_playback(rec, None).unwrap();
        assert_eq!(all.view().unwrap().avatars.len(), 3);
    }

    #[test]
    fn view_has_audio_samples_and_progress() {
        let tmp = tempfile::tempdir().unwrap();
        let rec = Arc::new(small_recording(tmp.path(), 100));
        let mut s = open_playback(rec.clone(), Some("lee")).unwrap();
        s.seek(15);
        let v = s.view().unwrap();
        assert_eq!(v.audio[0].samples.as_ref().unwrap().len(), samples_for_tick(15, 48_000, 72));
        assert!(v.audio[0].samples.as_ref().unwrap().iter().all(|&x| x == 15));
        assert_eq!(v.utterances.len(), 1);
        assert!(v.utterances[0].in_progress);
        s.seek(20);
        assert!(!s.view().unwrap().utterances[0].in_progress);
        s.seek(21);
        assert!(s.view().unwrap().utterances.is_empty());
        assert_eq!(view_at(&rec, Some("lee"), 15, false).unwrap(), view_at(&rec, Some("lee"), 15, false).unwrap());
    }

    #[test]
    fn seek_and_play_bounds() {
        let tmp = tempfile::tempdir().unwrap();
        let rec = Arc::new(small_recording(tmp.path(), 100));
        let mut s = open_playback(rec, Some("lee")).unwrap();
        assert_eq!(s.seek(500), SeekResult::Clamped { requested: 500, to: 100 });
        s.play();
        assert_eq!(s.mode(), &Mode::Paused);
        assert_eq!(s.advance(5), 0);
        s.seek(90);
        s.play();
        let mut last = s.cursor();
        while s.mode() == &Mode::Playing {
            s.advance(1);
            assert!(s.cursor() > last);
            last = s.cursor();
        }
        assert_eq!(s.cursor(), 100);
        let v = s.view().unwrap();
        assert_eq!(v.avatars[0].frame_tick, 99);
    }

    #[test]
    fn comment_lifecycle() {
        let tmp = tempfile::tempdir().unwrap();
        let rec = Arc::new(small_recording(tmp.path(), 2000));
        let mut s = open_playback(rec, Some("lee")).unwrap();
        assert!(matches!(s.end_comment("lee", vec![]), Err(PlaybackError::State(_))));
        s.seek(1000);
        s.play();
        assert_eq!(s.begin_comment().unwrap(), 1000);
        assert!(matches!(s.end_comment("lee", vec![]), Err(PlaybackError::EmptyContribution)));
        s.begin_comment().unwrap();
        let captured: Vec<_> = (5000..5000 + 216).map(|t| RecordedEvent::Pose(pose(t, "lee", [0.0, 0.0, 1.5]))).collect();
        let c = s.end_comment("lee", captured).unwrap();
        assert_eq!((c.anchor_tick, c.duration_ticks), (1000, 216));
        assert_eq!(c.frames[0].tick, 0);
        assert_eq!(s.mode(), &Mode::Paused);
        assert_eq!(s.cursor(), 1000);
        s.begin_comment().unwrap();
        let c2 = s.end_comment("lee", vec![RecordedEvent::Pose(pose(3, "lee", [0.0; 3]))]).unwrap();
        assert_eq!(c2.anchor_tick, 1000);
        let seqs: Vec<_> = s.pending_contributions().iter().map(|c| c.created_seq).collect();
        assert_eq!(seqs, vec![0, 1]);
    }

    #[test]
    fn three_second_clip_is_216_ticks() {
        let rates = AudioRates::default();
        let c = Contribution::from_media("c1", "lee", 1000, 0, Some(&vec![100; 3 * 48_000]), None, [0.0; 3], 0.0, None, rates)
            .unwrap();
        assert_eq!(c.duration_ticks, 216);
        assert_eq!(c.audio.len(), 216);
        assert_eq!(c.frames.len(), 216);
        let t = Contribution::from_media("c2", "lee", 0, 1, None, Some("sounds good to me"), [0.0; 3], 0.0, None, rates).unwrap();
        assert_eq!(t.duration_ticks, 116);
        assert_eq!(t.utterances[0].end_tick, 115);
        assert!(matches!(
            Contribution::from_media("c3", "lee", 0, 2, None, Some("  "), [0.0; 3], 0.0, None, rates),
            Err(PlaybackError::EmptyContribution)
        ));
    }
}
