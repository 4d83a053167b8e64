use std::path::PathBuf;

use seam_core::events::GestureTag;
use seam_core::recorder::load;
use seam_core::sim::{run, run_embedded, RunOptions, Script, SimError};

fn script(name: &str) -> Script {
    Script::from_file(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)).unwrap()
}

#[test]
fn empty_script_records_only_standin_idle_frames() {
    let s = script("empty.json");
    let tmp = tempfile::tempdir().unwrap();
    let r = run_embedded(&s, tmp.path(), RunOptions::default()).unwrap();
    let rec = load(&r.recording_dir).unwrap();
    assert_eq!(rec.duration_ticks(), 144);
    assert!(rec.motion().iter().all(|p| p.participant_id == "lee" && p.gesture_tag == GestureTag::None && !p.speaking_hint));
    assert_eq!(rec.motion().len(), 144);
    assert!(rec.utterances().is_empty());
    assert_eq!(r.agent_trace.len(), 1);
}

#[test]
fn unknown_participant_is_rejected() {
    let mut s = script("weekend_other.json");
    s.participants[0].participant_id = "zed".into();
    let tmp = tempfile::tempdir().unwrap();
    let err = run_embedded(&s, tmp.path(), RunOptions::default()).unwrap_err();
    assert!(matches!(err, SimError::Script(m) if m.contains("zed")));
}

#[test]
fn backwards_timeline_is_rejected() {
    let mut s = script("weekend_other.json");
    s.participants[0].timeline.reverse();
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(run_embedded(&s, tmp.path(), RunOptions::default()), Err(SimError::Script(_))));
}

#[test]
fn absentee_cannot_be_scripted() {
    let s = script("weekend_other.json");
    let mut meeting = s.meeting.clone().unwrap();
    meeting.iterations[0].attendees.retain(|a| a != "b");
    let tmp = tempfile::tempdir().unwrap();
    let err = run(&s, &meeting, s.standins.as_deref().unwrap(), tmp.path(), RunOptions::default()).unwrap_err();
    assert!(matches!(err, SimError::Script(m) if m.contains("absentee")));
}

#[test]
fn every_client_hears_the_standin() {
    let s = script("weekend_other.json");
    let tmp = tempfile::tempdir().unwrap();
    let r = run_embedded(&s, tmp.path(), RunOptions::default()).unwrap();
    for id in ["a", "b"] {
        let d = &r.deliveries[id];
        assert_eq!(d.by_type.get("welcome"), Some(&1));
        assert_eq!(d.by_type.get("standin_action"), Some(&1));
        assert_eq!(d.by_type.get("bye"), Some(&1));
        assert_eq!(d.duplicates, 0);
    }
    // a hears b's utterance and lee's, b hears a's two and lee's.
    assert_eq!(r.deliveries["a"].by_type.get("utterance"), Some(&2));
    assert_eq!(r.deliveries["b"].by_type.get("utterance"), Some(&3));
}

#[test]
fn latency_beyond_the_window_drops_events() {
    let mut s = script("weekend_other.json");
    s.injected_latency_ms = 400;
    let tmp = tempfile::tempdir().unwrap();
    let r = run_embedded(&s, tmp.path(), RunOptions::default()).unwrap();
    assert!(r.drop_counters.late > 0);
}
