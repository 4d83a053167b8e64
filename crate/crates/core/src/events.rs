//! Per-tick events exchanged live and stored in recordings.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::model::Tick;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GestureTag {
    #[default]
    None,
    Nod,
    Shrug,
    Wave,
    Point,
    HeadPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub tick: Tick,
    pub participant_id: String,
    pub position: [f32; 3],
    pub yaw: f32,
    pub gesture_tag: GestureTag,
    pub speaking_hint: bool,
}

impl PoseFrame {
    pub fn is_valid(&self) -> bool {
        self.position.iter().all(|c| c.is_finite()) && self.yaw.is_finite() && (0.0..360.0).contains(&self.yaw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioChunk {
    pub tick: Tick,
    pub participant_id: String,
    pub rms: f32,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "pcm_base64")]
    pub pcm: Option<Vec<i16>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceEvent {
    pub start_tick: Tick,
    pub end_tick: Tick,
    pub speaker_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub addressed_to: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Pose,
    Audio,
    Utterance,
}

/// Anything that lands in a recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecordedEvent {
    Pose(PoseFrame),
    Audio(AudioChunk),
    Utterance(UtteranceEvent),
}

impl RecordedEvent {
    pub fn tick(&self) -> Tick {
        match self {
            RecordedEvent::Pose(p) => p.tick,
            RecordedEvent::Audio(a) => a.tick,
            RecordedEvent::Utterance(u) => u.start_tick,
        }
    }

    /// Last tick the event occupies.
    pub fn last_tick(&self) -> Tick {
        match self {
            RecordedEvent::Utterance(u) => u.end_tick.max(u.start_tick),
            other => other.tick(),
        }
    }

    pub fn participant_id(&self) -> &str {
        match self {
            RecordedEvent::Pose(p) => &p.participant_id,
            RecordedEvent::Audio(a) => &a.participant_id,
            RecordedEvent::Utterance(u) => &u.speaker_id,
        }
    }

    pub fn kind(&self) -> EventKind {
        match self {
            RecordedEvent::Pose(_) => EventKind::Pose,
            RecordedEvent::Audio(_) => EventKind::Audio,
            RecordedEvent::Utterance(_) => EventKind::Utterance,
        }
    }

    /// Recording order: tick, then participant, then Pose < Audio < Utterance.
    pub fn order(&self, other: &Self) -> Ordering {
        self.tick()
            .cmp(&other.tick())
            .then_with(|| self.participant_id().cmp(other.participant_id()))
            .then_with(|| self.kind().cmp(&other.kind()))
    }

    /// Moves the event by a signed number of ticks.
    pub fn shifted(&self, delta: i64) -> Self {
        let mv = |t: Tick| (t as i64 + delta) as Tick;
        match self {
            RecordedEvent::Pose(p) => RecordedEvent::Pose(PoseFrame { tick: mv(p.tick), ..p.clone() }),
            RecordedEvent::Audio(a) => RecordedEvent::Audio(AudioChunk { tick: mv(a.tick), ..a.clone() }),
            RecordedEvent::Utterance(u) => RecordedEvent::Utterance(UtteranceEvent {
                start_tick: mv(u.start_tick),
                end_tick: mv(u.end_tick),
                ..u.clone()
            }),
        }
    }
}

/// Sorts events into recording order, keeping arrival order for equal keys.
pub fn sort_events(events: &mut [RecordedEvent]) {
    events.sort_by(|a, b| a.order(b));
}

/// First sample index of `tick` when `sample_rate` samples are spread over
/// `tick_rate` ticks. Rounded so that any tick count maps to
/// `round(ticks * sample_rate / tick_rate)` samples in total.
pub fn sample_offset(tick: Tick, sample_rate: u32, tick_rate: u32) -> u64 {
    let num = 2 * tick as u128 * sample_rate as u128 + tick_rate as u128;
    (num / (2 * tick_rate as u128)) as u64
}

/// Samples carried by one tick (666 or 667 at 48 kHz / 72 ticks).
pub fn samples_for_tick(tick: Tick, sample_rate: u32, tick_rate: u32) -> usize {
    (sample_offset(tick + 1, sample_rate, tick_rate) - sample_offset(tick, sample_rate, tick_rate)) as usize
}

/// Linear RMS of 16-bit samples in 0..1.
pub fn compute_rms(samples: &[i16]) -> f32 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples.iter().map(|&s| (s as f64 / 32768.0).powi(2)).sum();
    (sum / samples.len() as f64).sqrt() as f32
}

/// Adjusts a chunk to `len` samples by repeating or dropping trailing samples.
pub fn fit_samples(samples: &[i16], len: usize) -> Vec<i16> {
    let mut out = samples.to_vec();
    let pad = samples.last().copied().unwrap_or(0);
    out.resize(len, pad);
    out
}

mod pcm_base64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(pcm: &Option<Vec<i16>>, s: S) -> Result<S::Ok, S::Error> {
        match pcm {
            Some(samples) => {
                let bytes: Vec<u8> = samples.iter().flat_map(|v| v.to_le_bytes()).collect();
                s.serialize_str(&STANDARD.encode(bytes))
            }
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<i16>>, D::Error> {
        let Some(text) = Option::<String>::deserialize(d)? else {
            return Ok(None);
        };
        let bytes = STANDARD.decode(text).map_err(serde::de::Error::custom)?;
        if bytes.len() % 2 != 0 {
            return Err(serde::de::Error::custom("pcm byte length must be even"));
        }
        Ok(Some(bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_per_tick_alternate() {
        let counts: Vec<_> = (0..6).map(|t| samples_for_tick(t, 48_000, 72)).collect();
        assert_eq!(counts, vec![667, 666, 667, 667, 666, 667]);
        assert_eq!(sample_offset(72, 48_000, 72), 48_000);
        assert_eq!(sample_offset(60 * 72, 48_000, 72), 2_880_000);
    }

    #[test]
    fn sample_total_matches_rounding_for_any_length() {
        for d in 0..500u64 {
            let total: usize = (0..d).map(|t| samples_for_tick(t, 48_000, 72)).sum();
            let expected = (d as f64 * 48_000.0 / 72.0).round() as usize;
            assert_eq!(total, expected, "duration {d}");
        }
    }

    #[test]
    fn pcm_round_trips_through_base64() {
        let chunk = AudioChunk { tick: 3, participant_id: "a".into(), rms: 0.5, pcm: Some(vec![-1, 0, 1, i16::MIN, i16::MAX]) };
        let json = serde_json::to_string(&chunk).unwrap();
        assert!(json.contains("\"pcm\":\"//8AAAEAAID/fw==\""));
        assert_eq!(serde_json::from_str::<AudioChunk>(&json).unwrap(), chunk);
    }

    #[test]
    fn kind_breaks_ties() {
        let pose = RecordedEvent::Pose(PoseFrame {
            tick: 5,
            participant_id: "a".into(),
            position: [0.0; 3],
            yaw: 0.0,
            gesture_tag: GestureTag::None,
            speaking_hint: false,
        });
        let audio = RecordedEvent::Audio(AudioChunk { tick: 5, participant_id: "a".into(), rms: 0.0, pcm: None });
        let utt = RecordedEvent::Utterance(UtteranceEvent {
            start_tick: 5,
            end_tick: 9,
            speaker_id: "a".into(),
            text: "hi".into(),
            addressed_to: None,
        });
        let mut v = vec![utt.clone(), audio.clone(), pose.clone()];
        sort_events(&mut v);
        assert_eq!(v, vec![pose, audio, utt]);
    }
}
