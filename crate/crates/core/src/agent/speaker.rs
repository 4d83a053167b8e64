//! Active-speaker estimation from per-participant audio energy.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::model::Tick;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeakerParams {
    /// Ticks averaged per participant.
    pub window: usize,
    /// Energy a speaker's windowed mean must exceed.
    pub threshold: f32,
    /// Ticks a new candidate must lead before becoming active.
    pub hysteresis: u64,
    /// Consecutive all-quiet ticks that clear the active speaker.
    pub silence_clear: u64,
}

impl Default for SpeakerParams {
    fn default() -> Self {
        Self { window: 24, threshold: 0.05, hysteresis: 36, silence_clear: 48 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEstimate {
    pub active: Option<String>,
    pub since_tick: Tick,
    params: SpeakerParams,
    windows: BTreeMap<String, VecDeque<f32>>,
    leader: Option<String>,
    leader_since: Tick,
    silent_ticks: u64,
}

impl Default for SpeakerEstimate {
    fn default() -> Self {
        Self::new(SpeakerParams::default())
    }
}

impl SpeakerEstimate {
    pub fn new(params: SpeakerParams) -> Self {
        Self {
            active: None,
            since_tick: 0,
            params,
            windows: BTreeMap::new(),
            leader: None,
            leader_since: 0,
            silent_ticks: 0,
        }
    }

    pub fn params(&self) -> &SpeakerParams {
        &self.params
    }

    /// Consecutive ticks in which every participant stayed below the threshold.
    pub fn silent_ticks(&self) -> u64 {
        self.silent_ticks
    }

    pub fn windowed_rms(&self) -> BTreeMap<String, f32> {
        self.windows.iter().map(|(id, w)| (id.clone(), mean(w))).collect()
    }

    /// Feeds one tick of energy readings. Participants missing from `rms`
    /// count as silent for this tick.
    pub fn observe(&mut self, tick: Tick, rms: &BTreeMap<String, f32>) -> Option<&str> {
        let p = self.params;
        for id in rms.keys() {
            self.windows.entry(id.clone()).or_default();
        }
        for (id, w) in self.windows.iter_mut() {
            w.push_back(rms.get(id).copied().unwrap_or(0.0).max(0.0));
            while w.len() > p.window.max(1) {
                w.pop_front();
            }
        }

        if rms.values().all(|&v| v < p.threshold) {
            self.silent_ticks += 1;
        } else {
            self.silent_ticks = 0;
        }

        // BTreeMap iterates in id order, so strict `>` keeps the smallest id on ties.
        let mut candidate: Option<(&String, f32)> = None;
        for (id, w) in &self.windows {
            let m = mean(w);
            if m > p.threshold && candidate.is_none_or(|(_, best)| m > best) {
                candidate = Some((id, m));
            }
        }
        let candidate = candidate.map(|(id, _)| id.clone());
        if candidate != self.leader {
            self.leader = candidate;
            self.leader_since = tick;
        }

        if self.silent_ticks >= p.silence_clear {
            if self.active.is_some() {
                self.active = None;
                self.since_tick = tick;
            }
        } else if let Some(leader) = &self.leader {
            let led_for = tick.saturating_sub(self.leader_since) + 1;
            if self.active.as_ref() != Some(leader) && led_for >= p.hysteresis && self.silent_ticks == 0 {
                self.active = Some(leader.clone());
                self.since_tick = tick;
            }
        }
        self.active.as_deref()
    }
}

/// Functional form of [`SpeakerEstimate::observe`].
pub fn detect_speaker(estimate: &SpeakerEstimate, tick: Tick, rms: &BTreeMap<String, f32>) -> SpeakerEstimate {
    let mut next = estimate.clone();
    next.observe(tick, rms);
    next
}

fn mean(w: &VecDeque<f32>) -> f32 {
    if w.is_empty() {
        0.0
    } else {
        w.iter().sum::<f32>() / w.len() as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn levels(pairs: &[(&str, f32)]) -> BTreeMap<String, f32> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn silence_keeps_none() {
        let mut est = SpeakerEstimate::default();
        for t in 0..48 {
            est.observe(t, &levels(&[("a", 0.0), ("b", 0.0)]));
        }
        assert_eq!(est.active, None);
        assert_eq!(est.silent_ticks(), 48);
    }

    #[test]
    fn steady_speaker_becomes_active_after_hysteresis() {
        let mut est = SpeakerEstimate::default();
        for t in 0..35 {
            est.observe(t, &levels(&[("a", 0.3), ("b", 0.0)]));
            assert_eq!(est.active, None, "tick {t}");
        }
        est.observe(35, &levels(&[("a", 0.3), ("b", 0.0)]));
        assert_eq!(est.active.as_deref(), Some("a"));
        assert_eq!(est.since_tick, 35);
    }

    #[test]
    fn equal_energy_picks_smallest_id() {
        let mut est = SpeakerEstimate::default();
        for t in 0..36 {
            est.observe(t, &levels(&[("b", 0.3), ("a", 0.3)]));
        }
        assert_eq!(est.active.as_deref(), Some("a"));
    }

    #[test]
    fn silence_clears_after_48_ticks() {
        let mut est = SpeakerEstimate::default();
        for t in 0..40 {
            est.observe(t, &levels(&[("a", 0.3)]));
        }
        assert_eq!(est.active.as_deref(), Some("a"));
        for t in 40..87 {
            est.observe(t, &levels(&[("a", 0.0)]));
            assert!(est.active.is_some(), "cleared early at {t}");
        }
        est.observe(87, &levels(&[("a", 0.0)]));
        assert_eq!(est.active, None);
    }

    #[test]
    fn functional_form_leaves_input_untouched() {
        let est = SpeakerEstimate::default();
        let next = detect_speaker(&est, 0, &levels(&[("a", 0.5)]));
        assert_eq!(est.windowed_rms().len(), 0);
        assert_eq!(next.windowed_rms()["a"], 0.5);
    }
}
