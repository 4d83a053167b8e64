//! Turning response text into per-tick audio, and service transcripts into utterances.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Duration;

use log::warn;
use thiserror::Error;

use super::clients::{stt_with_deadline, tts_with_deadline, SttClient, TtsClient, TtsRequest};
use crate::events::{compute_rms, sample_offset, AudioChunk, UtteranceEvent};
use crate::model::{ResponsePlan, Tick};
use crate::wav;

const TONE_HZ: f64 = 220.0;
/// -20 dBFS peak.
const TONE_AMPLITUDE: f64 = 0.1 * 32767.0;
const TONE_MS: u64 = 200;
const GAP_MS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AudioRates {
    pub tick_rate: u32,
    pub sample_rate: u32,
}

impl Default for AudioRates {
    fn default() -> Self {
        Self { tick_rate: crate::model::DEFAULT_TICK_RATE, sample_rate: crate::model::DEFAULT_SAMPLE_RATE }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeechOutput {
    pub chunks: Vec<AudioChunk>,
    /// Why the offline placeholder was used instead of the configured service.
    pub degradation: Option<String>,
}

/// Offline stand-in voice: one tone burst per word followed by a short gap,
/// trimmed or padded with silence to `total` samples.
pub fn placeholder_samples(words: usize, total: usize, sample_rate: u32) -> Vec<i16> {
    let tone = (TONE_MS * sample_rate as u64 / 1000) as usize;
    let gap = (GAP_MS * sample_rate as u64 / 1000) as usize;
    let mut out = Vec::with_capacity(total);
    for _ in 0..words {
        for i in 0..tone {
            let v = TONE_AMPLITUDE * (2.0 * PI * TONE_HZ * i as f64 / sample_rate as f64).sin();
            out.push(v.round() as i16);
        }
        out.extend(std::iter::repeat_n(0i16, gap));
        if out.len() >= total {
            break;
        }
    }
    out.resize(total, 0);
    out
}

/// Slices a sample stream into chunks aligned with absolute tick boundaries.
pub fn chunk_stream(participant_id: &str, start_tick: Tick, ticks: u64, samples: &[i16], rates: AudioRates) -> Vec<AudioChunk> {
    let base = sample_offset(start_tick, rates.sample_rate, rates.tick_rate);
    (0..ticks)
        .map(|i| {
            let t = start_tick + i;
            let from = (sample_offset(t, rates.sample_rate, rates.tick_rate) - base) as usize;
            let to = (sample_offset(t + 1, rates.sample_rate, rates.tick_rate) - base) as usize;
            let mut pcm: Vec<i16> = samples.get(from.min(samples.len())..to.min(samples.len())).unwrap_or(&[]).to_vec();
            pcm.resize(to - from, 0);
            AudioChunk { tick: t, participant_id: participant_id.to_string(), rms: compute_rms(&pcm), pcm: Some(pcm) }
        })
        .collect()
}

pub fn synthesize_speech(
    plan: &ResponsePlan,
    participant_id: &str,
    start_tick: Tick,
    voice_ref: Option<&str>,
    tts: Option<&Arc<dyn TtsClient>>,
    deadline: Duration,
    rates: AudioRates,
) -> SpeechOutput {
    let words = plan.text.split_whitespace().count();
    if words == 0 {
        return SpeechOutput { chunks: Vec::new(), degradation: None };
    }
    let ticks = plan.nominal_duration_ticks;
    let total = (sample_offset(start_tick + ticks, rates.sample_rate, rates.tick_rate)
        - sample_offset(start_tick, rates.sample_rate, rates.tick_rate)) as usize;

    let mut degradation = None;
    let mut samples = None;
    if let Some(client) = tts {
        let req = TtsRequest { text: plan.text.clone(), voice_ref: voice_ref.unwrap_or_default().to_string() };
        match tts_with_deadline(client, req, deadline) {
            Ok(body) => match wav::decode(&body) {
                Ok(w) if w.sample_rate != rates.sample_rate => {
                    degradation = Some(format!("sample-rate mismatch: got {} Hz, need {} Hz", w.sample_rate, rates.sample_rate));
                }
                Ok(w) if w.channels != 1 || w.bits_per_sample != 16 => {
                    degradation = Some(format!("format mismatch: {} channels, {} bits", w.channels, w.bits_per_sample));
                }
                Ok(w) => samples = Some(w.samples),
                Err(e) => degradation = Some(format!("tts returned invalid wav: {e}")),
            },
            Err(e) => degradation = Some(format!("tts failed: {e}")),
        }
    }
    if let Some(d) = &degradation {
        warn!("stand-in {participant_id}: {d}; using offline voice");
    }
    let mut samples = samples.unwrap_or_else(|| placeholder_samples(words, total, rates.sample_rate));
    samples.resize(total, 0);
    SpeechOutput { chunks: chunk_stream(participant_id, start_tick, ticks, &samples, rates), degradation }
}

/// A stretch of one participant's audio submitted for transcription.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioWindow {
    pub participant_id: String,
    pub start_tick: Tick,
    pub samples: Vec<i16>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no speech-to-text client configured; utterances come from the wire")]
pub struct SttUnavailable;

pub fn transcribe(
    window: &AudioWindow,
    stt: Option<&Arc<dyn SttClient>>,
    deadline: Duration,
    rates: AudioRates,
) -> Result<Vec<UtteranceEvent>, SttUnavailable> {
    let client = stt.ok_or(SttUnavailable)?;
    let body = wav::encode(&window.samples, rates.sample_rate);
    let resp = match stt_with_deadline(client, body, deadline) {
        Ok(r) => r,
        Err(e) => {
            warn!("transcription for {} failed: {e}", window.participant_id);
            return Ok(Vec::new());
        }
    };
    let text = resp.transcript.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let to_tick = |ms: u64| (ms as u128 * rates.tick_rate as u128 / 1000) as Tick;
    let (start_ms, end_ms) = match (resp.words.first(), resp.words.last()) {
        (Some(first), Some(last)) => (first.start_ms, last.end_ms),
        _ => {
            let ms = window.samples.len() as u64 * 1000 / rates.sample_rate as u64;
            (0, ms)
        }
    };
    let start = window.start_tick + to_tick(start_ms);
    // end_ms is exclusive; round up to the tick that contains its last instant.
    let end_ticks = (end_ms as u128 * rates.tick_rate as u128).div_ceil(1000) as Tick;
    let end = (window.start_tick + end_ticks).saturating_sub(1).max(start);
    Ok(vec![UtteranceEvent {
        start_tick: start,
        end_tick: end,
        speaker_id: window.participant_id.clone(),
        text: text.to_string(),
        addressed_to: None,
    }])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::clients::{ClientError, SttResponse, SttWord};
    use crate::events::samples_for_tick;
    use crate::model::Gesture;

    struct FixedTts(Vec<u8>);
    impl TtsClient for FixedTts {
        fn synthesize(&self, _: &TtsRequest) -> Result<Vec<u8>, ClientError> {
            Ok(self.0.clone())
        }
    }

    struct FixedStt(Result<SttResponse, ClientError>);
    impl SttClient for FixedStt {
        fn transcribe(&self, _: &[u8]) -> Result<SttResponse, ClientError> {
            self.0.clone()
        }
    }

    struct SlowStt;
    impl SttClient for SlowStt {
        fn transcribe(&self, _: &[u8]) -> Result<SttResponse, ClientError> {
            std::thread::sleep(Duration::from_millis(300));
            Ok(SttResponse { transcript: "late".into(), words: vec![] })
        }
    }

    fn five_words() -> ResponsePlan {
        ResponsePlan::new("I'm not good at swimming", Gesture::Wave)
    }

    #[test]
    fn empty_text_has_no_audio() {
        let plan = ResponsePlan { text: String::new(), gesture: Gesture::None, nominal_duration_ticks: 1 };
        let out = synthesize_speech(&plan, "lee", 0, None, None, DEFAULT, AudioRates::default());
        assert!(out.chunks.is_empty());
    }

    const DEFAULT: Duration = Duration::from_millis(500);

    #[test]
    fn offline_voice_fills_nominal_duration() {
        let out = synthesize_speech(&five_words(), "lee", 10, None, None, DEFAULT, AudioRates::default());
        assert_eq!(out.chunks.len(), 144);
        assert_eq!(out.chunks[0].tick, 10);
        assert_eq!(out.chunks[143].tick, 153);
        for c in &out.chunks {
            assert_eq!(c.pcm.as_ref().unwrap().len(), samples_for_tick(c.tick, 48_000, 72));
            assert!((c.rms - compute_rms(c.pcm.as_ref().unwrap())).abs() <= 1e-3);
        }
        let total: usize = out.chunks.iter().map(|c| c.pcm.as_ref().unwrap().len()).sum();
        assert_eq!(total, 96_000);
        // first word is a tone at -20 dBFS peak, then a gap
        let first = &out.chunks[0];
        assert!(first.rms > 0.06 && first.rms < 0.08, "rms {}", first.rms);
        assert_eq!(out.chunks[15].rms, 0.0);
        assert!(out.degradation.is_none());
    }

    #[test]
    fn wrong_sample_rate_falls_back() {
        let client: Arc<dyn TtsClient> = Arc::new(FixedTts(wav::encode(&vec![1000; 44_100], 44_100)));
        let out = synthesize_speech(&five_words(), "lee", 0, Some("v.wav"), Some(&client), DEFAULT, AudioRates::default());
        assert!(out.degradation.unwrap().contains("sample-rate mismatch"));
        assert_eq!(out.chunks.len(), 144);
        let offline = synthesize_speech(&five_words(), "lee", 0, None, None, DEFAULT, AudioRates::default());
        assert_eq!(out.chunks, offline.chunks);
    }

    #[test]
    fn tts_audio_is_resliced() {
        let client: Arc<dyn TtsClient> = Arc::new(FixedTts(wav::encode(&vec![500; 1000], 48_000)));
        let out = synthesize_speech(&five_words(), "lee", 1, None, Some(&client), DEFAULT, AudioRates::default());
        assert!(out.degradation.is_none());
        assert_eq!(out.chunks.len(), 144);
        assert_eq!(out.chunks[0].pcm.as_ref().unwrap().len(), 666);
        assert!(out.chunks[0].pcm.as_ref().unwrap().iter().all(|&s| s == 500));
        assert_eq!(out.chunks[1].pcm.as_ref().unwrap()[333], 500);
        assert_eq!(out.chunks[1].pcm.as_ref().unwrap()[334], 0);
    }

    fn window() -> AudioWindow {
        AudioWindow { participant_id: "a".into(), start_tick: 0, samples: vec![0; 48_000] }
    }

    #[test]
    fn transcription_needs_a_client() {
        assert_eq!(transcribe(&window(), None, DEFAULT, AudioRates::default()), Err(SttUnavailable));
    }

    #[test]
    fn mocked_transcript_maps_to_ticks() {
        let client: Arc<dyn SttClient> = Arc::new(FixedStt(Ok(SttResponse {
            transcript: "hello".into(),
            words: vec![SttWord { w: "hello".into(), start_ms: 0, end_ms: 1000 }],
        })));
        let out = transcribe(&window(), Some(&client), DEFAULT, AudioRates::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].start_tick, out[0].end_tick, out[0].text.as_str()), (0, 71, "hello"));
    }

    #[test]
    fn failures_degrade_to_nothing() {
        let slow: Arc<dyn SttClient> = Arc::new(SlowStt);
        assert_eq!(transcribe(&window(), Some(&slow), Duration::from_millis(20), AudioRates::default()), Ok(vec![]));
        let broken: Arc<dyn SttClient> = Arc::new(FixedStt(Err(ClientError::Transport("refused".into()))));
        assert_eq!(transcribe(&window(), Some(&broken), DEFAULT, AudioRates::default()), Ok(vec![]));
    }
}
