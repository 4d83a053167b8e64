//! Inserting contributions into a recording to form the next iteration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::events::{fit_samples, samples_for_tick, GestureTag, PoseFrame, RecordedEvent};
use crate::model::Tick;
use crate::protocol::RosterEntry;
use crate::recorder::{open_writer, Origin, ProvenanceSpan, Recording, RecordingManifest};

use super::{facing, Contribution, PlaybackError, LISTENING_NOD_PERIOD};
use crate::agent::AudioRates;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpliceOptions {
    /// Recorded avatars face the commenter and nod during inserted spans
    /// instead of holding their last frame.
    pub listening: bool,
}

impl Default for SpliceOptions {
    fn default() -> Self {
        Self { listening: true }
    }
}

/// Where each contribution lands in the output, in splice order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplicePlan {
    /// Indices into the caller's contribution slice, sorted by (anchor, creation).
    pub order: Vec<usize>,
    /// Output start tick of each contribution, parallel to `order`.
    pub starts: Vec<Tick>,
    anchors: Vec<Tick>,
    prefix: Vec<Tick>,
}

impl SplicePlan {
    pub fn new(contributions: &[Contribution]) -> Self {
        let mut order: Vec<usize> = (0..contributions.len()).collect();
        order.sort_by_key(|&i| (contributions[i].anchor_tick, contributions[i].created_seq));
        let mut prefix = vec![0];
        let mut starts = Vec::new();
        let mut anchors = Vec::new();
        for &i in &order {
            let c = &contributions[i];
            let before = *prefix.last().expect("non-empty");
            starts.push(c.anchor_tick + before);
            anchors.push(c.anchor_tick);
            prefix.push(before + c.duration_ticks);
        }
        Self { order, starts, anchors, prefix }
    }

    /// Ticks inserted at or before source tick `t`.
    pub fn shift(&self, t: Tick) -> Tick {
        self.prefix[self.anchors.partition_point(|&a| a <= t)]
    }

    pub fn inserted(&self) -> Tick {
        *self.prefix.last().expect("non-empty")
    }
}

/// Frames for every recorded participant except the author, facing the
/// commenter for the length of the contribution (local ticks).
pub fn listening_frames(source: &Recording, contribution: &Contribution, commenter_position: [f32; 3]) -> Vec<PoseFrame> {
    let mut out = Vec::new();
    for pid in source.manifest.participant_ids() {
        if pid == contribution.author_id {
            continue;
        }
        let frozen = match contribution.anchor_tick.checked_sub(1).and_then(|t| source.pose_at(pid, t)) {
            Some(p) => p,
            None => match source.poses_of(pid).next() {
                Some(p) => p,
                None => continue,
            },
        };
        for l in 0..contribution.duration_ticks {
            out.push(PoseFrame {
                tick: l,
                participant_id: pid.to_string(),
                position: frozen.position,
                yaw: facing(frozen.position, commenter_position, frozen.yaw),
                gesture_tag: if l % LISTENING_NOD_PERIOD < LISTENING_NOD_PERIOD / 2 { GestureTag::Nod } else { GestureTag::None },
                speaking_hint: false,
            });
        }
    }
    out
}

fn commenter_position(source: &Recording, c: &Contribution) -> [f32; 3] {
    if let Some(f) = c.frames.first() {
        return f.position;
    }
    c.anchor_tick
        .checked_sub(1)
        .and_then(|t| source.pose_at(&c.author_id, t))
        .or_else(|| source.poses_of(&c.author_id).next())
        .map(|p| p.position)
        .unwrap_or([0.0; 3])
}

fn retime(event: &RecordedEvent, to: Tick, end: Tick, rates: AudioRates) -> RecordedEvent {
    let delta = to as i64 - event.tick() as i64;
    match event.shifted(delta) {
        RecordedEvent::Audio(mut a) => {
            if let Some(pcm) = &a.pcm {
                a.pcm = Some(fit_samples(pcm, samples_for_tick(a.tick, rates.sample_rate, rates.tick_rate)));
            }
            RecordedEvent::Audio(a)
        }
        RecordedEvent::Utterance(mut u) => {
            u.end_tick = end;
            RecordedEvent::Utterance(u)
        }
        other => other,
    }
}

/// Writes iteration k+1: the source timeline with every contribution
/// inserted at its anchor and later material shifted right.
pub fn splice(
    source: &Recording,
    contributions: &[Contribution],
    recordings_dir: &Path,
    options: SpliceOptions,
) -> Result<(RecordingManifest, PathBuf), PlaybackError> {
    let m = &source.manifest;
    let rates = AudioRates { tick_rate: m.tick_rate, sample_rate: m.audio_sample_rate };
    for c in contributions {
        c.validate(rates)?;
        if m.attendees.contains(&c.author_id) {
            return Err(PlaybackError::AuthorRole(c.author_id.clone(), m.iteration_index));
        }
        if c.anchor_tick > m.duration_ticks {
            return Err(PlaybackError::InvalidContribution(format!(
                "anchor {} beyond duration {}",
                c.anchor_tick, m.duration_ticks
            )));
        }
    }
    let plan = SplicePlan::new(contributions);

    let mut roster = m.roster.clone();
    let mut authors = BTreeSet::new();
    for c in contributions {
        authors.insert(c.author_id.clone());
        if !roster.iter().any(|r| r.participant_id == c.author_id) {
            roster.push(RosterEntry { participant_id: c.author_id.clone(), display_name: c.author_id.clone(), standin: false });
        }
    }

    let next = m.iteration_index + 1;
    let mut w = open_writer(recordings_dir, &m.meeting_id, next, &roster, m.tick_rate, m.audio_sample_rate)?;
    w.set_parent_iteration(Some(m.iteration_index));
    w.set_attendees(authors.into_iter().collect());
    w.set_duration(m.duration_ticks + plan.inserted());
    w.set_provenance(provenance(&m.provenance, contributions, &plan, next));

    for e in source.events()? {
        let end = e.last_tick();
        let moved = retime(&e, e.tick() + plan.shift(e.tick()), end + plan.shift(end), rates);
        w.append(&moved)?;
    }
    for (k, &i) in plan.order.iter().enumerate() {
        let c = &contributions[i];
        let start = plan.starts[k];
        let mut inserted = c.events();
        if options.listening {
            let pos = commenter_position(source, c);
            inserted.extend(listening_frames(source, c, pos).into_iter().map(RecordedEvent::Pose));
        }
        for e in inserted {
            let moved = retime(&e, start + e.tick(), start + e.last_tick(), rates);
            w.append(&moved)?;
        }
    }
    let dir = w.dir().to_path_buf();
    Ok((w.finalize()?, dir))
}

fn provenance(source: &[ProvenanceSpan], contributions: &[Contribution], plan: &SplicePlan, iteration: u32) -> Vec<ProvenanceSpan> {
    let mut out = Vec::new();
    for span in source {
        let mut cuts: Vec<Tick> = plan.anchors.iter().copied().filter(|&a| a > span.from_tick && a < span.to_tick).collect();
        cuts.dedup();
        let mut from = span.from_tick;
        for to in cuts.into_iter().chain(std::iter::once(span.to_tick)) {
            let s = plan.shift(from);
            out.push(ProvenanceSpan { from_tick: from + s, to_tick: to + s, origin: span.origin.clone() });
            from = to;
        }
    }
    for (k, &i) in plan.order.iter().enumerate() {
        let c = &contributions[i];
        out.push(ProvenanceSpan {
            from_tick: plan.starts[k],
            to_tick: plan.starts[k] + c.duration_ticks,
            origin: Origin::Contribution { iteration, contribution_id: c.contribution_id.clone(), author_id: c.author_id.clone() },
        });
    }
    out.sort_by_key(|s| s.from_tick);
    out
}

/// Brute-force splice: walks the source one tick at a time, emitting any
/// insertions anchored at that tick before the tick itself. `inserts` are
/// (anchor, creation, local events, duration). Returns the output events in
/// recording order and the output duration.
pub fn splice_reference(
    source_events: &[RecordedEvent],
    source_duration: Tick,
    inserts: &[(Tick, u64, Vec<RecordedEvent>, Tick)],
    rates: AudioRates,
) -> (Vec<RecordedEvent>, Tick) {
    let mut map = Vec::with_capacity(source_duration as usize + 1);
    let mut placed: Vec<(Tick, &Vec<RecordedEvent>)> = Vec::new();
    let mut out_tick: Tick = 0;
    for t in 0..=source_duration {
        let mut here: Vec<&(Tick, u64, Vec<RecordedEvent>, Tick)> = inserts.iter().filter(|c| c.0 == t).collect();
        here.sort_by_key(|c| c.1);
        for c in here {
            placed.push((out_tick, &c.2));
            out_tick += c.3;
        }
        map.push(out_tick);
        out_tick += 1;
    }
    let duration = out_tick - 1;
    let mut out = Vec::new();
    for e in source_events {
        let start = map[e.tick() as usize];
        let end = map[e.last_tick() as usize];
        out.push(retime(e, start, end, rates));
    }
    for (start, events) in placed {
        for e in events {
            out.push(retime(e, start + e.tick(), start + e.last_tick(), rates));
        }
    }
    crate::events::sort_events(&mut out);
    (out, duration)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::agent::bearing;
    use crate::recorder::load;

    fn comment(id: &str, anchor: Tick, seq: u64, duration: Tick) -> Contribution {
        Contribution {
            contribution_id: id.into(),
            author_id: "lee".into(),
            anchor_tick: anchor,
            created_seq: seq,
            frames: (0..duration).map(|t| pose(t, "lee", [0.0, 0.0, 1.5])).collect(),
            audio: Vec::new(),
            utterances: Vec::new(),
            duration_ticks: duration,
        }
    }

    #[test]
    fn no_contributions_is_identity() {
        let tmp = tempfile::tempdir().unwrap();
        let src = small_recording(tmp.path(), 300);
        let (m, dir) = splice(&src, &[], tmp.path(), SpliceOptions::default()).unwrap();
        assert_eq!(m.parent_iteration, Some(1));
        assert_eq!(m.iteration_index, 2);
        assert_eq!(m.duration_ticks, 300);
        let out = load(&dir).unwrap();
        assert_eq!(out.events().unwrap(), src.events().unwrap());
        for t in &src.manifest.tracks {
            assert_eq!(out.manifest.track(&t.participant_id, t.kind).unwrap().checksum, t.checksum);
        }
    }

    #[test]
    fn one_comment_adds_its_duration() {
        let tmp = tempfile::tempdir().unwrap();
        let src = small_recording(tmp.path(), 1200);
        let (m, dir) = splice(&src, &[comment("c1", 1000, 0, 216)], tmp.path(), SpliceOptions::default()).unwrap();
        assert_eq!(m.duration_ticks, 1416);
        assert_eq!(m.attendees, vec!["lee".to_string()]);
        let out = load(&dir).unwrap();
        assert_eq!(out.pose_at("a", 1216).unwrap().tick, 1216);
        let listening: Vec<_> = out
            .motion()
            .iter()
            .filter(|p| (1000..1216).contains(&p.tick) && p.participant_id != "lee")
            .collect();
        assert_eq!(listening.len(), 432);
        let to_lee = bearing([-1.0, 0.0, 0.0], [0.0, 0.0, 1.5]);
        assert!(listening.iter().filter(|p| p.participant_id == "a").all(|p| (p.yaw - to_lee).abs() < 1e-4));
        let spans: Vec<_> = m.provenance.iter().map(|s| (s.from_tick, s.to_tick)).collect();
        assert_eq!(spans, vec![(0, 1000), (1000, 1216), (1216, 1416)]);
    }

    #[test]
    fn listening_off_freezes_avatars() {
        let tmp = tempfile::tempdir().unwrap();
        let src = small_recording(tmp.path(), 1200);
        let (_, dir) = splice(&src, &[comment("c1", 1000, 0, 216)], tmp.path(), SpliceOptions { listening: false }).unwrap();
        let out = load(&dir).unwrap();
        assert_eq!(out.pose_at("a", 1100).unwrap().tick, 999);
    }

    #[test]
    fn two_comments_shift_cumulatively() {
        let tmp = tempfile::tempdir().unwrap();
        let src = small_recording(tmp.path(), 1200);
        let cs = [comment("late", 800, 1, 144), comment("early", 100, 0, 216)];
        let (m, _) = splice(&src, &cs, tmp.path(), SpliceOptions::default()).unwrap();
        assert_eq!(m.duration_ticks, 1200 + 360);
        let starts: Vec<_> = m
            .provenance
            .iter()
            .filter_map(|s| match &s.origin {
                Origin::Contribution { contribution_id, .. } => Some((contribution_id.clone(), s.from_tick)),
                _ => None,
            })
            .collect();
        assert_eq!(starts, vec![("early".to_string(), 100), ("late".to_string(), 1016)]);
    }

    #[test]
    fn attendee_cannot_contribute() {
        let tmp = tempfile::tempdir().unwrap();
        let src = small_recording(tmp.path(), 100);
        let mut c = comment("c", 10, 0, 5);
        c.author_id = "a".into();
        c.frames.iter_mut().for_each(|f| f.participant_id = "a".into());
        assert!(matches!(splice(&src, &[c], tmp.path(), SpliceOptions::default()), Err(PlaybackError::AuthorRole(..))));
    }

    #[test]
    fn shift_matches_reference_walk() {
        let cs = [comment("x", 5, 0, 3), comment("y", 5, 1, 2), comment("z", 9, 0, 4)];
        let plan = SplicePlan::new(&cs);
        let shifts: Vec<_> = (0..12).map(|t| plan.shift(t)).collect();
        assert_eq!(shifts, vec![0, 0, 0, 0, 0, 5, 5, 5, 5, 9, 9, 9]);
        assert_eq!(plan.starts, vec![5, 8, 14]);
    }
}
