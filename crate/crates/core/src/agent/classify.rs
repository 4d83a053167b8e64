//! Deciding whether an utterance is for the stand-in, and which agenda item it concerns.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::events::{PoseFrame, UtteranceEvent};
use crate::model::{AgendaItem, StandInConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Classification {
    Topic { item_id: String, score: u32 },
    Other,
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Number of distinct keywords of `item` present in `tokens`.
pub fn keyword_score(tokens: &BTreeSet<String>, item: &AgendaItem) -> u32 {
    let keywords: BTreeSet<&str> = item.keywords.iter().map(String::as_str).collect();
    keywords.iter().filter(|k| tokens.contains(**k)).count() as u32
}

/// Best agenda item for `text`: highest score, ties to the lowest order.
pub fn best_item<'a>(text: &str, agenda: &'a [AgendaItem]) -> Option<(&'a AgendaItem, u32)> {
    let tokens: BTreeSet<String> = tokenize(text).into_iter().collect();
    agenda
        .iter()
        .map(|item| (item, keyword_score(&tokens, item)))
        .filter(|(_, s)| *s >= 1)
        .min_by(|(a, sa), (b, sb)| sb.cmp(sa).then(a.order.cmp(&b.order)))
}

pub fn classify_text(text: &str, agenda: &[AgendaItem]) -> Classification {
    match best_item(text, agenda) {
        Some((item, score)) => Classification::Topic { item_id: item.item_id.clone(), score },
        None => Classification::Other,
    }
}

/// Compass bearing in degrees from `from` to `to` on the floor plane.
/// Yaw 0 faces +z and grows towards +x.
pub fn bearing(from: [f32; 3], to: [f32; 3]) -> f32 {
    let dx = to[0] - from[0];
    let dz = to[2] - from[2];
    normalize_yaw(dx.atan2(dz).to_degrees())
}

pub fn normalize_yaw(deg: f32) -> f32 {
    let y = deg.rem_euclid(360.0);
    if y >= 360.0 { 0.0 } else { y }
}

/// Absolute angular difference in degrees, in 0..=180.
pub fn angle_between(a: f32, b: f32) -> f32 {
    let d = (a - b).rem_euclid(360.0);
    if d > 180.0 { 360.0 - d } else { d }
}

pub fn faces(pose: &PoseFrame, target: [f32; 3], tolerance_deg: f32) -> bool {
    angle_between(pose.yaw, bearing(pose.position, target)) <= tolerance_deg
}

/// Whether the stand-in should treat `utterance` as directed at it.
/// An utterance explicitly addressed to someone else is never taken.
pub fn is_addressed(utterance: &UtteranceEvent, config: &StandInConfig, speaker_faces_standin: bool) -> bool {
    match &utterance.addressed_to {
        Some(to) if *to == config.absentee_id => return true,
        Some(_) => return false,
        None => {}
    }
    let lower = utterance.text.to_lowercase();
    let named = config
        .addressing_names
        .iter()
        .filter(|n| !n.trim().is_empty())
        .any(|n| lower.contains(&n.to_lowercase()));
    named || speaker_faces_standin
}

/// Classifies an utterance for the stand-in, or `None` when it was not addressed.
pub fn classify(
    utterance: &UtteranceEvent,
    agenda: &[AgendaItem],
    config: &StandInConfig,
    speaker_faces_standin: bool,
) -> Option<Classification> {
    is_addressed(utterance, config, speaker_faces_standin).then(|| classify_text(&utterance.text, agenda))
}
