//! Domain types shared by the session, recorder, agent and playback modules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Engine time unit. One tick is one recorded frame.
pub type Tick = u64;

pub const DEFAULT_TICK_RATE: u32 = 72;
pub const DEFAULT_SAMPLE_RATE: u32 = 48_000;
pub const DEFAULT_WORDS_PER_MINUTE: u32 = 150;
/// Minimum voice sample length accepted for a profile, in seconds.
pub const MIN_VOICE_SAMPLE_SECS: f64 = 10.0;

/// Converts a tick count to whole milliseconds (floored).
///
/// Panics if `rate` is zero.
pub fn ticks_to_millis(t: Tick, rate: u32) -> u64 {
    assert!(rate > 0, "tick rate must be positive");
    ((t as u128 * 1000) / rate as u128) as u64
}

/// Converts milliseconds to whole ticks (floored).
///
/// Panics if `rate` is zero.
pub fn millis_to_ticks(ms: u64, rate: u32) -> Tick {
    assert!(rate > 0, "tick rate must be positive");
    ((ms as u128 * rate as u128) / 1000) as u64
}

/// Number of ticks needed to speak `text` at `wpm` words per minute, rounded up.
pub fn speech_duration_ticks(text: &str, wpm: u32, tick_rate: u32) -> Tick {
    let words = text.split_whitespace().count() as u64;
    let wpm = wpm.max(1) as u64;
    (words * 60 * tick_rate as u64).div_ceil(wpm)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgendaItem {
    pub item_id: String,
    pub label: String,
    pub keywords: Vec<String>,
    pub order: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantProfile {
    pub participant_id: String,
    pub display_name: String,
    #[serde(default)]
    pub background: String,
    #[serde(default)]
    pub personality: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voice_sample_ref: Option<String>,
}

/// One pass of the meeting and who joined it live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u32,
    pub attendees: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recording: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meeting {
    pub meeting_id: String,
    pub title: String,
    pub agenda: Vec<AgendaItem>,
    pub participants: Vec<ParticipantProfile>,
    #[serde(default)]
    pub iterations: Vec<IterationRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gesture {
    Shrug,
    Wave,
    Point(String),
    HeadPoint,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponsePlan {
    pub text: String,
    pub gesture: Gesture,
    pub nominal_duration_ticks: Tick,
}

impl ResponsePlan {
    /// Builds a plan whose duration follows the default speaking rate.
    pub fn new(text: impl Into<String>, gesture: Gesture) -> Self {
        Self::with_rate(text, gesture, DEFAULT_WORDS_PER_MINUTE, DEFAULT_TICK_RATE)
    }

    pub fn with_rate(text: impl Into<String>, gesture: Gesture, wpm: u32, tick_rate: u32) -> Self {
        let text = text.into();
        let nominal_duration_ticks = speech_duration_ticks(&text, wpm, tick_rate).max(1);
        Self { text, gesture, nominal_duration_ticks }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StandInConfig {
    pub absentee_id: String,
    pub responses: BTreeMap<String, ResponsePlan>,
    pub fallback: ResponsePlan,
    #[serde(default)]
    pub addressing_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Attendee,
    Absentee,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LookupError {
    #[error("unknown participant {0}")]
    UnknownParticipant(String),
    #[error("unknown iteration {0}")]
    UnknownIteration(u32),
}

impl Meeting {
    pub fn participant(&self, id: &str) -> Option<&ParticipantProfile> {
        self.participants.iter().find(|p| p.participant_id == id)
    }

    pub fn iteration(&self, index: u32) -> Option<&IterationRecord> {
        self.iterations.iter().find(|i| i.index == index)
    }

    pub fn agenda_item(&self, item_id: &str) -> Option<&AgendaItem> {
        self.agenda.iter().find(|a| a.item_id == item_id)
    }

    pub fn role_of(&self, participant_id: &str, iteration_index: u32) -> Result<Role, LookupError> {
        if self.participant(participant_id).is_none() {
            return Err(LookupError::UnknownParticipant(participant_id.to_string()));
        }
        let iteration = self
            .iteration(iteration_index)
            .ok_or(LookupError::UnknownIteration(iteration_index))?;
        if iteration.attendees.iter().any(|a| a == participant_id) {
            Ok(Role::Attendee)
        } else {
            Ok(Role::Absentee)
        }
    }
}

/// A broken invariant, named by field and rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self { field: field.into(), rule: rule.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

pub fn validate_meeting(meeting: &Meeting) -> Vec<Violation> {
    let mut out = Vec::new();
    if meeting.agenda.is_empty() {
        out.push(Violation::new("agenda", "must not be empty"));
    }

    let mut orders = BTreeSet::new();
    let mut item_ids = BTreeSet::new();
    for item in &meeting.agenda {
        if !item_ids.insert(item.item_id.as_str()) {
            out.push(Violation::new("agenda", format!("duplicate item id {}", item.item_id)));
        }
        if !orders.insert(item.order) {
            out.push(Violation::new("agenda", format!("duplicate order {}", item.order)));
        }
        let field = format!("agenda.{}.keywords", item.item_id);
        if item.keywords.is_empty() {
            out.push(Violation::new(&field, "must not be empty"));
        }
        let mut seen = BTreeSet::new();
        for kw in &item.keywords {
            if kw.is_empty() || *kw != kw.to_lowercase() {
                out.push(Violation::new(&field, format!("keyword {kw:?} must be non-empty lowercase")));
            }
            if !seen.insert(kw.as_str()) {
                out.push(Violation::new(&field, format!("duplicate keyword {kw}")));
            }
        }
    }

    let mut ids = BTreeSet::new();
    for p in &meeting.participants {
        if !ids.insert(p.participant_id.as_str()) {
            out.push(Violation::new("participants", format!("duplicate id {}", p.participant_id)));
        }
    }

    for (pos, it) in meeting.iterations.iter().enumerate() {
        let expected = pos as u32 + 1;
        if it.index != expected {
            out.push(Violation::new(
                "iterations",
                format!("index {} breaks contiguous numbering, expected {expected}", it.index),
            ));
        }
        for a in &it.attendees {
            if !ids.contains(a.as_str()) {
                out.push(Violation::new(
                    format!("iterations.{}.attendees", it.index),
                    format!("unknown participant {a}"),
                ));
            }
        }
    }
    out
}

/// Checks a stand-in configuration against the meeting it serves.
pub fn validate_standin(config: &StandInConfig, meeting: &Meeting) -> Vec<Violation> {
    let mut out = Vec::new();
    if meeting.participant(&config.absentee_id).is_none() {
        out.push(Violation::new("absentee_id", format!("unknown participant {}", config.absentee_id)));
    }
    for (item_id, plan) in &config.responses {
        if meeting.agenda_item(item_id).is_none() {
            out.push(Violation::new("responses", format!("unknown agenda item {item_id}")));
        }
        check_plan(&format!("responses.{item_id}"), plan, &mut out);
    }
    check_plan("fallback", &config.fallback, &mut out);
    out
}

fn check_plan(field: &str, plan: &ResponsePlan, out: &mut Vec<Violation>) {
    if plan.text.trim().is_empty() {
        out.push(Violation::new(field, "text must not be empty"));
    }
    let expected = speech_duration_ticks(&plan.text, DEFAULT_WORDS_PER_MINUTE, DEFAULT_TICK_RATE).max(1);
    if plan.nominal_duration_ticks != expected {
        out.push(Violation::new(
            field,
            format!("nominal_duration_ticks {} != {expected} from speaking rate", plan.nominal_duration_ticks),
        ));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn sample_meeting() -> Meeting {
        let p = |id: &str| ParticipantProfile {
            participant_id: id.into(),
            display_name: id.into(),
            background: String::new(),
            personality: String::new(),
            voice_sample_ref: None,
        };
        Meeting {
            meeting_id: "weekend".into(),
            title: "Weekend planning".into(),
            agenda: vec![AgendaItem {
                item_id: "place".into(),
                label: "Place".into(),
                keywords: vec!["place".into(), "beach".into()],
                order: 0,
            }],
            participants: vec![p("A"), p("B"), p("C")],
            iterations: vec![
                IterationRecord { index: 1, attendees: vec!["A".into(), "B".into()], recording: None },
                IterationRecord { index: 2, attendees: vec!["C".into()], recording: None },
            ],
        }
    }

    #[test]
    fn tick_conversion_examples() {
        assert_eq!(ticks_to_millis(72, 72), 1000);
        assert_eq!(ticks_to_millis(0, 72), 0);
        assert_eq!(ticks_to_millis(108, 72), 1500);
        assert_eq!(millis_to_ticks(1500, 72), 108);
    }

    #[test]
    fn roles_follow_attendance() {
        let m = sample_meeting();
        assert_eq!(m.role_of("C", 1).unwrap(), Role::Absentee);
        assert_eq!(m.role_of("C", 2).unwrap(), Role::Attendee);
        assert_eq!(m.role_of("A", 2).unwrap(), Role::Absentee);
        assert_eq!(m.role_of("Z", 1), Err(LookupError::UnknownParticipant("Z".into())));
        assert_eq!(m.role_of("A", 9), Err(LookupError::UnknownIteration(9)));
    }

    #[test]
    fn duplicate_participant_is_reported() {
        let mut m = sample_meeting();
        assert!(validate_meeting(&m).is_empty());
        m.participants[1].participant_id = "p1".into();
        m.participants[2].participant_id = "p1".into();
        m.iterations.clear();
        let v = validate_meeting(&m);
        assert_eq!(v.iter().map(|v| v.to_string()).collect::<Vec<_>>(), vec!["participants: duplicate id p1"]);
    }

    #[test]
    fn standin_with_unknown_item_is_reported() {
        let m = sample_meeting();
        let mut responses = BTreeMap::new();
        responses.insert("dessert".to_string(), ResponsePlan::new("Ice cream", Gesture::None));
        let cfg = StandInConfig {
            absentee_id: "C".into(),
            responses,
            fallback: ResponsePlan::new("Later", Gesture::HeadPoint),
            addressing_names: vec!["C".into()],
        };
        let v = validate_standin(&cfg, &m);
        assert_eq!(v.len(), 1);
        assert!(v[0].rule.contains("dessert"));
    }

    #[test]
    fn each_broken_invariant_is_caught() {
        type Mutation = fn(&mut Meeting);
        let mutations: Vec<Mutation> = vec![
            |m| m.agenda.clear(),
            |m| m.agenda[0].keywords.clear(),
            |m| m.agenda[0].keywords[0] = "Beach".into(),
            |m| m.agenda[0].keywords[1] = "place".into(),
            |m| {
                let mut dup = m.agenda[0].clone();
                dup.item_id = "other".into();
                m.agenda.push(dup);
            },
            |m| m.participants[0].participant_id = "B".into(),
            |m| m.iterations[1].index = 3,
            |m| m.iterations[0].attendees.push("ghost".into()),
        ];
        for (i, mutate) in mutations.iter().enumerate() {
            let mut m = sample_meeting();
            mutate(&mut m);
            assert!(!validate_meeting(&m).is_empty(), "mutation {i} not detected");
        }
    }

    #[test]
    fn duration_rule() {
        assert_eq!(speech_duration_ticks("one two three four five", 150, 72), 144);
        assert_eq!(ResponsePlan::new("I prefer beef noodles", Gesture::None).nominal_duration_ticks, 116);
    }

    proptest! {
        #[test]
        fn tick_millis_round_trip(t in 0u64..10_000_000, rate in 1u32..=1000) {
            let ms = ticks_to_millis(t, rate);
            let back = millis_to_ticks(ms, rate);
            if (t * 1000) % rate as u64 == 0 {
                prop_assert_eq!(back, t);
            } else {
                // Exact time of the floored millisecond stays within one tick.
                let exact = ms as f64 * rate as f64 / 1000.0;
                prop_assert!((t as f64 - exact) < 1.0);
                prop_assert!(back == t || back + 1 == t);
            }
        }

        #[test]
        fn roles_partition_each_iteration(mask in proptest::collection::vec(any::<bool>(), 3)) {
            let mut m = sample_meeting();
            m.iterations[0].attendees = ["A", "B", "C"]
                .iter()
                .zip(&mask)
                .filter(|(_, &on)| on)
                .map(|(id, _)| id.to_string())
                .collect();
            let attendees: Vec<_> = ["A", "B", "C"].iter().filter(|id| m.role_of(id, 1).unwrap() == Role::Attendee).collect();
            let absentees: Vec<_> = ["A", "B", "C"].iter().filter(|id| m.role_of(id, 1).unwrap() == Role::Absentee).collect();
            prop_assert_eq!(attendees.len() + absentees.len(), 3);
            prop_assert_eq!(attendees.len(), mask.iter().filter(|b| **b).count());
        }
    }
}
