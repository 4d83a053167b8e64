//! Per-viewer abridged timelines over an iteration chain.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::agent::classify::best_item;
use crate::agent::clients::{llm_with_deadline, ChatMessage, LlmClient, LlmRequest};
use crate::events::UtteranceEvent;
use crate::model::{speech_duration_ticks, AgendaItem, Tick, DEFAULT_WORDS_PER_MINUTE};
use crate::recorder::{load, Origin, RecorderError, Recording};

use super::PlaybackError;

pub const SUMMARY_JOINER: &str = " … ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "segment", rename_all = "snake_case")]
pub enum Segment {
    /// Played as recorded. Ticks index the head recording of the chain.
    Full { source_iteration: u32, from_tick: Tick, to_tick: Tick },
    Summary {
        source_iteration: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        agenda_item_id: Option<String>,
        text: String,
        synthetic_duration_ticks: Tick,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        contribution_ids: Vec<String>,
    },
}

impl Segment {
    pub fn duration_ticks(&self) -> Tick {
        match self {
            Segment::Full { from_tick, to_tick, .. } => to_tick - from_tick,
            Segment::Summary { synthetic_duration_ticks, .. } => *synthetic_duration_ticks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbridgedTimeline {
    pub viewer_id: String,
    pub meeting_id: String,
    pub head_iteration: u32,
    pub segments: Vec<Segment>,
    pub source_duration_ticks: Tick,
    pub duration_ticks: Tick,
}

/// Turns a cluster of utterances into summary text.
pub trait Summarizer {
    fn summarize(&self, utterances: &[UtteranceEvent], standins: &BTreeSet<String>, item: Option<&AgendaItem>) -> String;
}

/// First and last utterance of the cluster plus any stand-in responses.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExtractiveSummarizer;

impl Summarizer for ExtractiveSummarizer {
    fn summarize(&self, utterances: &[UtteranceEvent], standins: &BTreeSet<String>, _item: Option<&AgendaItem>) -> String {
        let mut picked: Vec<usize> = Vec::new();
        if !utterances.is_empty() {
            picked.push(0);
        }
        for (i, u) in utterances.iter().enumerate() {
            if standins.contains(&u.speaker_id) {
                picked.push(i);
            }
        }
        if utterances.len() > 1 {
            picked.push(utterances.len() - 1);
        }
        picked.sort_unstable();
        picked.dedup();
        picked.iter().map(|&i| utterances[i].text.trim()).collect::<Vec<_>>().join(SUMMARY_JOINER)
    }
}

/// Asks an LLM for the summary; falls back to the extractive text on failure.
pub struct LlmSummarizer {
    pub client: Arc<dyn LlmClient>,
    pub deadline: Duration,
}

impl Summarizer for LlmSummarizer {
    fn summarize(&self, utterances: &[UtteranceEvent], standins: &BTreeSet<String>, item: Option<&AgendaItem>) -> String {
        let topic = item.map(|i| i.label.as_str()).unwrap_or("general discussion");
        let transcript = utterances.iter().map(|u| format!("{}: {}", u.speaker_id, u.text)).collect::<Vec<_>>().join("\n");
        let req = LlmRequest {
            system: format!("Summarize this meeting excerpt about {topic} in one or two sentences."),
            messages: vec![ChatMessage { role: "user".into(), content: transcript }],
        };
        match llm_with_deadline(&self.client, req, self.deadline) {
            Ok(reply) if !reply.text.trim().is_empty() => reply.text.trim().to_string(),
            Ok(_) => ExtractiveSummarizer.summarize(utterances, standins, item),
            Err(e) => {
                log::warn!("summarizer unavailable ({e}); using extractive summary");
                ExtractiveSummarizer.summarize(utterances, standins, item)
            }
        }
    }
}

/// Loads a chain head and its ancestors, oldest first, from a meeting's
/// recording directory. The head is the directory named `head`.
pub fn load_chain(meeting_dir: &Path, head: &str) -> Result<Vec<Recording>, PlaybackError> {
    let mut chain = vec![load(&meeting_dir.join(head))?];
    while let Some(parent) = chain.last().expect("non-empty").manifest.parent_iteration {
        let dir = find_iteration_dir(meeting_dir, parent)?;
        chain.push(load(&dir)?);
    }
    chain.reverse();
    Ok(chain)
}

fn find_iteration_dir(meeting_dir: &Path, iteration: u32) -> Result<PathBuf, PlaybackError> {
    let exact = meeting_dir.join(iteration.to_string());
    if exact.join(crate::recorder::MANIFEST_FILE).exists() {
        return Ok(exact);
    }
    let rd = fs::read_dir(meeting_dir).map_err(|source| RecorderError::Io { path: meeting_dir.to_path_buf(), source })?;
    let mut candidates: Vec<String> = rd
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.split_once('-').map(|(i, _)| i) == Some(&iteration.to_string()))
        .collect();
    candidates.sort();
    candidates
        .pop()
        .map(|n| meeting_dir.join(n))
        .ok_or_else(|| PlaybackError::Chain(format!("no recording for iteration {iteration}")))
}

fn check_chain(chain: &[Recording]) -> Result<(), PlaybackError> {
    let head = chain.last().ok_or_else(|| PlaybackError::Chain("empty chain".into()))?;
    for pair in chain.windows(2) {
        let (prev, next) = (&pair[0].manifest, &pair[1].manifest);
        if next.meeting_id != prev.meeting_id {
            return Err(PlaybackError::Chain(format!("{} follows {}", next.meeting_id, prev.meeting_id)));
        }
        if next.parent_iteration != Some(prev.iteration_index) {
            return Err(PlaybackError::Chain(format!(
                "iteration {} does not extend iteration {}",
                next.iteration_index, prev.iteration_index
            )));
        }
    }
    let m = &head.manifest;
    let mut expected_from = 0;
    for s in &m.provenance {
        if s.from_tick != expected_from || s.to_tick <= s.from_tick {
            return Err(PlaybackError::Chain(format!("provenance of iteration {} has a gap at {}", m.iteration_index, expected_from)));
        }
        expected_from = s.to_tick;
    }
    if expected_from != m.duration_ticks {
        return Err(PlaybackError::Chain(format!("provenance of iteration {} does not cover the recording", m.iteration_index)));
    }
    Ok(())
}

/// Groups utterances into contiguous runs that match the same agenda item.
/// Unmatched talk joins the run before it.
fn clusters<'a>(utterances: &[&'a UtteranceEvent], agenda: &'a [AgendaItem]) -> Vec<(Option<&'a AgendaItem>, Vec<UtteranceEvent>)> {
    let mut out: Vec<(Option<&AgendaItem>, Vec<UtteranceEvent>)> = Vec::new();
    for u in utterances {
        let item = best_item(&u.text, agenda).map(|(i, _)| i);
        match (out.last_mut(), item) {
            (Some((cur, list)), Some(i)) if cur.is_some_and(|c| c.item_id == i.item_id) => list.push((*u).clone()),
            (Some((cur, list)), Some(i)) if cur.is_none() => {
                *cur = Some(i);
                list.push((*u).clone());
            }
            (Some((_, list)), None) => list.push((*u).clone()),
            (_, item) => out.push((item, vec![(*u).clone()])),
        }
    }
    out
}

/// Builds `viewer_id`'s timeline over the chain's head recording: spans the
/// viewer has already experienced become summaries, everything newer plays in full.
pub fn abridge(
    chain: &[Recording],
    agenda: &[AgendaItem],
    viewer_id: &str,
    summarizer: &dyn Summarizer,
) -> Result<AbridgedTimeline, PlaybackError> {
    check_chain(chain)?;
    let head = chain.last().expect("checked");
    let m = &head.manifest;
    let last_attended = chain
        .iter()
        .filter(|r| r.manifest.attendees.iter().any(|a| a == viewer_id))
        .map(|r| r.manifest.iteration_index)
        .max();
    let standins: BTreeSet<String> = m.standins().map(str::to_string).collect();

    let mut segments: Vec<Segment> = Vec::new();
    let push_full = |segments: &mut Vec<Segment>, iteration: u32, from: Tick, to: Tick| {
        if let Some(Segment::Full { source_iteration, to_tick, .. }) = segments.last_mut() {
            if *source_iteration == iteration && *to_tick == from {
                *to_tick = to;
                return;
            }
        }
        segments.push(Segment::Full { source_iteration: iteration, from_tick: from, to_tick: to });
    };

    for span in &m.provenance {
        let iteration = span.origin.iteration();
        let experienced = last_attended.is_some_and(|l| l >= iteration);
        if !experienced {
            push_full(&mut segments, iteration, span.from_tick, span.to_tick);
            continue;
        }
        let inside: Vec<&UtteranceEvent> =
            head.utterances().iter().filter(|u| u.start_tick >= span.from_tick && u.start_tick < span.to_tick).collect();
        let summaries: Vec<Segment> = match &span.origin {
            Origin::Contribution { contribution_id, author_id, .. } => {
                let item = inside.iter().find_map(|u| best_item(&u.text, agenda).map(|(i, _)| i));
                let owned: Vec<UtteranceEvent> = inside.iter().map(|u| (*u).clone()).collect();
                let mut text = summarizer.summarize(&owned, &standins, item);
                if text.is_empty() {
                    text = format!("{author_id} commented");
                }
                vec![summary(iteration, item, text, vec![contribution_id.clone()], m.tick_rate)]
            }
            Origin::Live { .. } => clusters(&inside, agenda)
                .into_iter()
                .map(|(item, list)| summary(iteration, item, summarizer.summarize(&list, &standins, item), Vec::new(), m.tick_rate))
                .collect(),
        };
        let summarized: Tick = summaries.iter().map(Segment::duration_ticks).sum();
        let is_contribution = matches!(span.origin, Origin::Contribution { .. });
        if summarized >= span.to_tick - span.from_tick && !(is_contribution && summaries.is_empty()) {
            push_full(&mut segments, iteration, span.from_tick, span.to_tick);
        } else {
            segments.extend(summaries);
        }
    }
    let duration_ticks = segments.iter().map(Segment::duration_ticks).sum();
    Ok(AbridgedTimeline {
        viewer_id: viewer_id.to_string(),
        meeting_id: m.meeting_id.clone(),
        head_iteration: m.iteration_index,
        segments,
        source_duration_ticks: m.duration_ticks,
        duration_ticks,
    })
}

fn summary(iteration: u32, item: Option<&AgendaItem>, text: String, contribution_ids: Vec<String>, tick_rate: u32) -> Segment {
    Segment::Summary {
        source_iteration: iteration,
        agenda_item_id: item.map(|i| i.item_id.clone()),
        synthetic_duration_ticks: speech_duration_ticks(&text, DEFAULT_WORDS_PER_MINUTE, tick_rate),
        text,
        contribution_ids,
    }
}

/// Writes `abridged_<viewer>.json` into the meeting's recording directory.
pub fn write_abridged(meeting_dir: &Path, timeline: &AbridgedTimeline) -> Result<PathBuf, PlaybackError> {
    let path = meeting_dir.join(format!("abridged_{}.json", timeline.viewer_id));
    let mut text = serde_json::to_string_pretty(timeline).expect("timeline serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|source| RecorderError::Io { path: path.clone(), source })?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::{splice, Contribution, SpliceOptions};
    use super::*;
    use crate::recorder::load;

    fn agenda() -> Vec<AgendaItem> {
        let item = |id: &str, order, kws: &[&str]| AgendaItem {
            item_id: id.into(),
            label: id.into(),
            keywords: kws.iter().map(|s| s.to_string()).collect(),
            order,
        };
        vec![item("place", 0, &["go", "beach"]), item("food", 1, &["eat", "noodles"])]
    }

    fn utt(start: Tick, end: Tick, who: &str, text: &str) -> UtteranceEvent {
        UtteranceEvent { start_tick: start, end_tick: end, speaker_id: who.into(), text: text.into(), addressed_to: None }
    }

    #[test]
    fn extractive_picks_first_last_and_standin() {
        let us = vec![
            utt(0, 1, "a", "Where should we go?"),
            utt(2, 3, "lee", "I'm okay with any of them"),
            utt(4, 5, "b", "ok"),
            utt(6, 7, "a", "Beach it is."),
        ];
        let standins: BTreeSet<String> = ["lee".to_string()].into();
        assert_eq!(
            ExtractiveSummarizer.summarize(&us, &standins, None),
            "Where should we go? … I'm okay with any of them … Beach it is."
        );
        assert_eq!(ExtractiveSummarizer.summarize(&us[..1], &standins, None), "Where should we go?");
    }

    #[test]
    fn unmatched_talk_joins_previous_cluster() {
        let us = [
            utt(0, 1, "a", "hello all"),
            utt(2, 3, "a", "where should we go"),
            utt(4, 5, "lee", "I'm okay with any of them"),
            utt(6, 7, "b", "what shall we eat"),
            utt(8, 9, "b", "noodles?"),
        ];
        let refs: Vec<&UtteranceEvent> = us.iter().collect();
        let ag = agenda();
        let cs = clusters(&refs, &ag);
        let shape: Vec<_> = cs.iter().map(|(i, l)| (i.map(|i| i.item_id.as_str()), l.len())).collect();
        assert_eq!(shape, vec![(Some("place"), 3), (Some("food"), 2)]);
    }

    #[test]
    fn viewer_who_missed_everything_sees_all_full() {
        let tmp = tempfile::tempdir().unwrap();
        let src = small_recording(tmp.path(), 500);
        let t = abridge(std::slice::from_ref(&src), &agenda(), "zoe", &ExtractiveSummarizer).unwrap();
        assert_eq!(t.segments, vec![Segment::Full { source_iteration: 1, from_tick: 0, to_tick: 500 }]);
        assert_eq!(t.duration_ticks, t.source_duration_ticks);
    }

    #[test]
    fn attendee_gets_summary_and_new_comment_in_full() {
        let tmp = tempfile::tempdir().unwrap();
        let src = small_recording(tmp.path(), 2000);
        let c = Contribution {
            contribution_id: "c1".into(),
            author_id: "lee".into(),
            anchor_tick: 1000,
            created_seq: 0,
            frames: (0..216).map(|t| pose(t, "lee", [0.0, 0.0, 1.5])).collect(),
            audio: Vec::new(),
            utterances: vec![utt(0, 215, "lee", "Let's go to the beach")],
            duration_ticks: 216,
        };
        let (_, dir) = splice(&src, &[c], tmp.path(), SpliceOptions::default()).unwrap();
        let chain = load_chain(dir.parent().unwrap(), "2").unwrap();
        assert_eq!(chain.len(), 2);
        let t = abridge(&chain, &agenda(), "a", &ExtractiveSummarizer).unwrap();
        assert!(matches!(&t.segments[0], Segment::Summary { source_iteration: 1, text, .. } if text == "where should we go"));
        assert_eq!(t.segments[1], Segment::Full { source_iteration: 2, from_tick: 1000, to_tick: 1216 });
        assert_eq!(t.segments.len(), 2, "{:?}", t.segments);
        assert!(t.duration_ticks < t.source_duration_ticks);

        let author = abridge(&chain, &agenda(), "lee", &ExtractiveSummarizer).unwrap();
        let named = author.segments.iter().any(|s| {
            matches!(s, Segment::Summary { contribution_ids, .. } if contribution_ids == &vec!["c1".to_string()])
                || matches!(s, Segment::Full { from_tick: 1000, .. })
        });
        assert!(named, "{:?}", author.segments);

        let path = write_abridged(dir.parent().unwrap(), &t).unwrap();
        assert!(path.ends_with("abridged_a.json"));
        let back: AbridgedTimeline = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn broken_chain_is_structural_error() {
        let tmp = tempfile::tempdir().unwrap();
        let a = small_recording(tmp.path(), 50);
        let b = load(&tmp.path().join("m").join("1")).unwrap();
        assert!(matches!(abridge(&[a, b], &agenda(), "a", &ExtractiveSummarizer), Err(PlaybackError::Chain(_))));
    }
}
