//! Recording codec: staged capture, finalization into tracks plus manifest,
//! and checksum-verified loading.
//!
//! Layout of one recording directory:
//!
//! ```text
//! manifest.json        metadata, track list, per-track SHA-256
//! motion.jsonl         pose frames, ordered by (tick, participant_id)
//! utterances.jsonl     utterances, ordered by (start_tick, speaker_id)
//! audio_index.jsonl    one line per audio chunk: tick, participant, rms, has pcm
//! audio_<pid>.wav      16-bit mono PCM per participant, silence where nothing was sent
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::events::{sample_offset, samples_for_tick, AudioChunk, EventKind, PoseFrame, RecordedEvent, UtteranceEvent};
use crate::model::Tick;
use crate::protocol::RosterEntry;
use crate::wav;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MOTION_FILE: &str = "motion.jsonl";
pub const UTTERANCE_FILE: &str = "utterances.jsonl";
pub const AUDIO_INDEX_FILE: &str = "audio_index.jsonl";
const STAGING_DIR: &str = ".staging";

#[derive(Debug, Error)]
pub enum RecorderError {
    #[error("{0}")]
    Argument(String),
    #[error("checksum mismatch for track {track}")]
    Integrity { track: String },
    #[error("corrupt recording: {0}")]
    Corrupt(String),
    #[error("duplicate {kind:?} event for {participant_id} at tick {tick}")]
    Duplicate { kind: EventKind, participant_id: String, tick: Tick },
    #[error("audio chunk for {participant_id} at tick {tick} has {got} samples, expected {expected}")]
    ChunkLength { participant_id: String, tick: Tick, got: usize, expected: usize },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RecorderError + '_ {
    move |source| RecorderError::Io { path: path.to_path_buf(), source }
}

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> RecorderError + '_ {
    move |e| match e {
        hound::Error::IoError(source) => RecorderError::Io { path: path.to_path_buf(), source },
        other => RecorderError::Corrupt(format!("{}: {other}", path.display())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackKind {
    Motion,
    Audio,
    Utterance,
}

impl TrackKind {
    fn label(self) -> &'static str {
        match self {
            TrackKind::Motion => "motion",
            TrackKind::Audio => "audio",
            TrackKind::Utterance => "utterance",
        }
    }
}

/// One participant's share of a track. Motion and utterance tracks share a
/// file across participants; their checksum covers only that participant's lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub participant_id: String,
    pub kind: TrackKind,
    pub path: String,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub checksum: String,
}

/// Where a stretch of the timeline came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "origin", rename_all = "snake_case")]
pub enum Origin {
    /// Captured live during an iteration.
    Live { iteration: u32 },
    /// A comment recorded during playback, merged in by a later iteration.
    Contribution { iteration: u32, contribution_id: String, author_id: String },
}

impl Origin {
    pub fn iteration(&self) -> u32 {
        match self {
            Origin::Live { iteration } | Origin::Contribution { iteration, .. } => *iteration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceSpan {
    pub from_tick: Tick,
    pub to_tick: Tick,
    #[serde(flatten)]
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingManifest {
    pub meeting_id: String,
    pub iteration_index: u32,
    pub tick_rate: u32,
    pub audio_sample_rate: u32,
    pub duration_ticks: Tick,
    pub roster: Vec<RosterEntry>,
    /// Participants present live (or commenting) in this iteration.
    pub attendees: Vec<String>,
    pub tracks: Vec<TrackEntry>,
    pub audio_index: FileEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_iteration: Option<u32>,
    #[serde(default)]
    pub provenance: Vec<ProvenanceSpan>,
}

impl RecordingManifest {
    pub fn participant_ids(&self) -> impl Iterator<Item = &str> {
        self.roster.iter().map(|r| r.participant_id.as_str())
    }

    pub fn standins(&self) -> impl Iterator<Item = &str> {
        self.roster.iter().filter(|r| r.standin).map(|r| r.participant_id.as_str())
    }

    pub fn track(&self, participant_id: &str, kind: TrackKind) -> Option<&TrackEntry> {
        self.tracks.iter().find(|t| t.participant_id == participant_id && t.kind == kind)
    }
}

/// Audio chunk metadata as stored in the audio index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioMeta {
    pub tick: Tick,
    pub participant_id: String,
    pub rms: f32,
    pub pcm: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Staged {
    Pose(PoseFrame),
    Audio(AudioMeta),
    Utterance(UtteranceEvent),
}

impl Staged {
    fn key(&self) -> (Tick, &str, EventKind) {
        match self {
            Staged::Pose(p) => (p.tick, &p.participant_id, EventKind::Pose),
            Staged::Audio(a) => (a.tick, &a.participant_id, EventKind::Audio),
            Staged::Utterance(u) => (u.start_tick, &u.speaker_id, EventKind::Utterance),
        }
    }

    fn last_tick(&self) -> Tick {
        match self {
            Staged::Utterance(u) => u.end_tick.max(u.start_tick),
            other => other.key().0,
        }
    }
}

/// Accepts events in arrival order and produces a sorted recording on `finalize`.
#[derive(Debug)]
pub struct Writer {
    dir: PathBuf,
    meeting_id: String,
    iteration_index: u32,
    tick_rate: u32,
    sample_rate: u32,
    roster: Vec<RosterEntry>,
    attendees: Option<Vec<String>>,
    parent_iteration: Option<u32>,
    provenance: Option<Vec<ProvenanceSpan>>,
    duration: Option<Tick>,
    events: BufWriter<File>,
    audio: BTreeMap<String, BufWriter<File>>,
    seen: HashSet<(EventKind, String, Tick)>,
    max_tick: Option<Tick>,
}

/// Opens a writer under `<dir>/<meeting_id>/<iteration_index>`, or a fresh
/// `-2`, `-3`, ... sibling when that directory is already taken.
pub fn open_writer(
    dir: &Path,
    meeting_id: &str,
    iteration_index: u32,
    roster: &[RosterEntry],
    tick_rate: u32,
    sample_rate: u32,
) -> Result<Writer, RecorderError> {
    if tick_rate == 0 || sample_rate == 0 {
        return Err(RecorderError::Argument("tick_rate and sample_rate must be positive".into()));
    }
    let parent = dir.join(meeting_id);
    fs::create_dir_all(&parent).map_err(io_err(&parent))?;
    let mut attempt = 1u32;
    let target = loop {
        let name = if attempt == 1 { iteration_index.to_string() } else { format!("{iteration_index}-{attempt}") };
        let candidate = parent.join(name);
        match fs::create_dir(&candidate) {
            Ok(()) => break candidate,
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => attempt += 1,
            Err(e) => return Err(RecorderError::Io { path: candidate, source: e }),
        }
    };
    Writer::create(target, meeting_id, iteration_index, roster, tick_rate, sample_rate)
}

impl Writer {
    /// Creates a writer directly in `dir`, which must exist and be empty of a manifest.
    pub fn create(
        dir: PathBuf,
        meeting_id: &str,
        iteration_index: u32,
        roster: &[RosterEntry],
        tick_rate: u32,
        sample_rate: u32,
    ) -> Result<Self, RecorderError> {
        if tick_rate == 0 || sample_rate == 0 {
            return Err(RecorderError::Argument("tick_rate and sample_rate must be positive".into()));
        }
        let staging = dir.join(STAGING_DIR);
        fs::create_dir_all(&staging).map_err(io_err(&staging))?;
        let events_path = staging.join("events.jsonl");
        let events = BufWriter::new(File::create(&events_path).map_err(io_err(&events_path))?);
        let mut w = Self {
            dir,
            meeting_id: meeting_id.to_string(),
            iteration_index,
            tick_rate,
            sample_rate,
            roster: Vec::new(),
            attendees: None,
            parent_iteration: None,
            provenance: None,
            duration: None,
            events,
            audio: BTreeMap::new(),
            seen: HashSet::new(),
            max_tick: None,
        };
        for r in roster {
            w.add_participant(r.clone())?;
        }
        Ok(w)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn roster(&self) -> &[RosterEntry] {
        &self.roster
    }

    pub fn add_participant(&mut self, entry: RosterEntry) -> Result<(), RecorderError> {
        if self.roster.iter().any(|r| r.participant_id == entry.participant_id) {
            return Ok(());
        }
        let path = self.dir.join(STAGING_DIR).join(format!("audio_{}.pcm", entry.participant_id));
        let f = File::create(&path).map_err(io_err(&path))?;
        self.audio.insert(entry.participant_id.clone(), BufWriter::new(f));
        self.roster.push(entry);
        Ok(())
    }

    pub fn set_parent_iteration(&mut self, parent: Option<u32>) {
        self.parent_iteration = parent;
    }

    pub fn set_attendees(&mut self, attendees: Vec<String>) {
        self.attendees = Some(attendees);
    }

    pub fn set_provenance(&mut self, spans: Vec<ProvenanceSpan>) {
        self.provenance = Some(spans);
    }

    /// Overrides the default `max tick + 1` duration. Must cover every event.
    pub fn set_duration(&mut self, ticks: Tick) {
        self.duration = Some(ticks);
    }

    pub fn append(&mut self, event: &RecordedEvent) -> Result<(), RecorderError> {
        let pid = event.participant_id().to_string();
        if !self.roster.iter().any(|r| r.participant_id == pid) {
            self.add_participant(RosterEntry { participant_id: pid.clone(), display_name: pid.clone(), standin: false })?;
        }
        if event.kind() != EventKind::Utterance && !self.seen.insert((event.kind(), pid.clone(), event.tick())) {
            return Err(RecorderError::Duplicate { kind: event.kind(), participant_id: pid, tick: event.tick() });
        }
        let staged = match event {
            RecordedEvent::Pose(p) => Staged::Pose(p.clone()),
            RecordedEvent::Utterance(u) => Staged::Utterance(u.clone()),
            RecordedEvent::Audio(a) => {
                if let Some(pcm) = &a.pcm {
                    let expected = samples_for_tick(a.tick, self.sample_rate, self.tick_rate);
                    if pcm.len() != expected {
                        self.seen.remove(&(EventKind::Audio, pid.clone(), a.tick));
                        return Err(RecorderError::ChunkLength { participant_id: pid, tick: a.tick, got: pcm.len(), expected });
                    }
                    let path = self.dir.join(STAGING_DIR).join(format!("audio_{pid}.pcm"));
                    let out = self.audio.get_mut(&pid).expect("participant registered above");
                    let mut rec = Vec::with_capacity(12 + pcm.len() * 2);
                    rec.extend_from_slice(&a.tick.to_le_bytes());
                    rec.extend_from_slice(&(pcm.len() as u32).to_le_bytes());
                    for s in pcm {
                        rec.extend_from_slice(&s.to_le_bytes());
                    }
                    out.write_all(&rec).map_err(io_err(&path))?;
                }
                Staged::Audio(AudioMeta { tick: a.tick, participant_id: pid.clone(), rms: a.rms, pcm: a.pcm.is_some() })
            }
        };
        let last = staged.last_tick();
        self.max_tick = Some(self.max_tick.map_or(last, |m| m.max(last)));
        let line = serde_json::to_string(&staged).expect("staged events serialize");
        let path = self.dir.join(STAGING_DIR).join("events.jsonl");
        writeln!(self.events, "{line}").map_err(io_err(&path))?;
        Ok(())
    }

    pub fn duration_so_far(&self) -> Tick {
        self.max_tick.map_or(0, |m| m + 1)
    }

    /// Sorts, writes every track, computes checksums and writes `manifest.json`.
    /// Staging files are removed only after everything else succeeded.
    pub fn finalize(mut self) -> Result<RecordingManifest, RecorderError> {
        let staging = self.dir.join(STAGING_DIR);
        let events_path = staging.join("events.jsonl");
        self.events.flush().map_err(io_err(&events_path))?;
        for (pid, w) in self.audio.iter_mut() {
            let p = staging.join(format!("audio_{pid}.pcm"));
            w.flush().map_err(io_err(&p))?;
        }

        let mut staged = Vec::new();
        let f = File::open(&events_path).map_err(io_err(&events_path))?;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(io_err(&events_path))?;
            let ev: Staged = serde_json::from_str(&line).map_err(|e| RecorderError::Corrupt(format!("staging: {e}")))?;
            staged.push(ev);
        }
        staged.sort_by(|a, b| a.key().cmp(&b.key()));

        let natural = self.max_tick.map_or(0, |m| m + 1);
        let duration = match self.duration {
            Some(d) if d < natural => {
                return Err(RecorderError::Argument(format!("duration {d} does not cover events up to tick {}", natural - 1)))
            }
            Some(d) => d,
            None => natural,
        };

        let mut roster = self.roster.clone();
        roster.sort_by(|a, b| a.participant_id.cmp(&b.participant_id));

        let mut motion = String::new();
        let mut utterances = String::new();
        let mut audio_index = String::new();
        for ev in &staged {
            let line = match ev {
                Staged::Pose(p) => (&mut motion, serde_json::to_string(p)),
                Staged::Utterance(u) => (&mut utterances, serde_json::to_string(u)),
                Staged::Audio(a) => (&mut audio_index, serde_json::to_string(a)),
            };
            line.0.push_str(&line.1.expect("events serialize"));
            line.0.push('\n');
        }
        write_file(&self.dir.join(MOTION_FILE), motion.as_bytes())?;
        write_file(&self.dir.join(UTTERANCE_FILE), utterances.as_bytes())?;
        write_file(&self.dir.join(AUDIO_INDEX_FILE), audio_index.as_bytes())?;

        let motion_sums = subset_checksums(motion.as_bytes(), "participant_id");
        let utterance_sums = subset_checksums(utterances.as_bytes(), "speaker_id");
        let empty = hex::encode(Sha256::digest(b""));

        let mut tracks = Vec::new();
        for r in &roster {
            let pid = &r.participant_id;
            tracks.push(TrackEntry {
                participant_id: pid.clone(),
                kind: TrackKind::Motion,
                path: MOTION_FILE.into(),
                checksum: motion_sums.get(pid.as_str()).cloned().unwrap_or_else(|| empty.clone()),
            });
            let wav_name = format!("audio_{pid}.wav");
            let wav_path = self.dir.join(&wav_name);
            self.write_wav(&staging.join(format!("audio_{pid}.pcm")), &wav_path, duration)?;
            tracks.push(TrackEntry {
                participant_id: pid.clone(),
                kind: TrackKind::Audio,
                path: wav_name,
                checksum: file_checksum(&wav_path)?,
            });
            tracks.push(TrackEntry {
                participant_id: pid.clone(),
                kind: TrackKind::Utterance,
                path: UTTERANCE_FILE.into(),
                checksum: utterance_sums.get(pid.as_str()).cloned().unwrap_or_else(|| empty.clone()),
            });
        }

        let attendees = self.attendees.clone().unwrap_or_else(|| {
            roster.iter().filter(|r| !r.standin).map(|r| r.participant_id.clone()).collect()
        });
        let provenance = self.provenance.clone().unwrap_or_else(|| {
            if duration == 0 {
                Vec::new()
            } else {
                vec![ProvenanceSpan { from_tick: 0, to_tick: duration, origin: Origin::Live { iteration: self.iteration_index } }]
            }
        });
        let manifest = RecordingManifest {
            meeting_id: self.meeting_id.clone(),
            iteration_index: self.iteration_index,
            tick_rate: self.tick_rate,
            audio_sample_rate: self.sample_rate,
            duration_ticks: duration,
            roster,
            attendees,
            tracks,
            audio_index: FileEntry { path: AUDIO_INDEX_FILE.into(), checksum: hex::encode(Sha256::digest(audio_index.as_bytes())) },
            parent_iteration: self.parent_iteration,
            provenance,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        write_file(&self.dir.join(MANIFEST_FILE), text.as_bytes())?;

        drop(self.events);
        self.audio.clear();
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
        Ok(manifest)
    }

    fn write_wav(&self, staged: &Path, out: &Path, duration: Tick) -> Result<(), RecorderError> {
        let mut chunks: Vec<(Tick, Vec<i16>)> = Vec::new();
        let mut bytes = Vec::new();
        File::open(staged).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(staged))?;
        let mut pos = 0;
        while pos + 12 <= bytes.len() {
            let tick = u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes"));
            let n = u32::from_le_bytes(bytes[pos + 8..pos + 12].try_into().expect("4 bytes")) as usize;
            pos += 12;
            let end = pos + n * 2;
            if end > bytes.len() {
                return Err(RecorderError::Corrupt(format!("truncated staging file {}", staged.display())));
            }
            let samples = bytes[pos..end].chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
            chunks.push((tick, samples));
            pos = end;
        }
        chunks.sort_by_key(|(t, _)| *t);

        let total = sample_offset(duration, self.sample_rate, self.tick_rate);
        let file = File::create(out).map_err(io_err(out))?;
        let mut w = hound::WavWriter::new(BufWriter::new(file), wav::mono16(self.sample_rate)).map_err(wav_err(out))?;
        let mut written = 0u64;
        for (tick, samples) in chunks {
            let at = sample_offset(tick, self.sample_rate, self.tick_rate);
            while written < at {
                w.write_sample(0i16).map_err(wav_err(out))?;
                written += 1;
            }
            for s in samples {
                w.write_sample(s).map_err(wav_err(out))?;
                written += 1;
            }
        }
        while written < total {
            w.write_sample(0i16).map_err(wav_err(out))?;
            written += 1;
        }
        w.finalize().map_err(wav_err(out))?;
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RecorderError> {
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

fn file_checksum(path: &Path) -> Result<String, RecorderError> {
    let mut f = File::open(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    io::copy(&mut f, &mut hasher).map_err(io_err(path))?;
    Ok(hex::encode(hasher.finalize()))
}

/// Owner of a JSON line, read leniently so that damaged lines still count
/// against somebody (or against nobody, which is itself a mismatch).
fn line_owner(line: &[u8], field: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_slice(line).ok()?;
    v.get(field)?.as_str().map(str::to_string)
}

/// SHA-256 over each owner's lines (newline included), in file order.
fn subset_checksums(bytes: &[u8], field: &str) -> BTreeMap<String, String> {
    let (sums, _) = subset_checksums_with_orphans(bytes, field);
    sums
}

fn subset_checksums_with_orphans(bytes: &[u8], field: &str) -> (BTreeMap<String, String>, usize) {
    let mut hashers: BTreeMap<String, Sha256> = BTreeMap::new();
    let mut orphans = 0;
    for line in bytes.split_inclusive(|b| *b == b'\n') {
        match line_owner(line, field) {
            Some(owner) => hashers.entry(owner).or_default().update(line),
            None => orphans += 1,
        }
    }
    (hashers.into_iter().map(|(k, h)| (k, hex::encode(h.finalize()))).collect(), orphans)
}

/// A finalized recording. Motion, utterances and the audio index are held
/// in memory; PCM is read from the WAV files on demand.
#[derive(Debug, Clone)]
pub struct Recording {
    pub dir: PathBuf,
    pub manifest: RecordingManifest,
    motion: Vec<PoseFrame>,
    motion_by_participant: BTreeMap<String, Vec<usize>>,
    utterances: Vec<UtteranceEvent>,
    audio_index: Vec<AudioMeta>,
}

pub fn load(dir: &Path) -> Result<Recording, RecorderError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: RecordingManifest =
        serde_json::from_str(&text).map_err(|e| RecorderError::Corrupt(format!("manifest: {e}")))?;

    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(io_err(&p))
    };
    let motion_bytes = read(MOTION_FILE)?;
    let utterance_bytes = read(UTTERANCE_FILE)?;
    let index_bytes = read(&manifest.audio_index.path)?;

    verify_shared(&manifest, TrackKind::Motion, &motion_bytes, "participant_id")?;
    verify_shared(&manifest, TrackKind::Utterance, &utterance_bytes, "speaker_id")?;
    if hex::encode(Sha256::digest(&index_bytes)) != manifest.audio_index.checksum {
        return Err(RecorderError::Integrity { track: "audio_index".into() });
    }
    for t in manifest.tracks.iter().filter(|t| t.kind == TrackKind::Audio) {
        if file_checksum(&dir.join(&t.path))? != t.checksum {
            return Err(RecorderError::Integrity { track: format!("audio:{}", t.participant_id) });
        }
    }

    let motion: Vec<PoseFrame> = parse_lines(&motion_bytes, "motion")?;
    let utterances: Vec<UtteranceEvent> = parse_lines(&utterance_bytes, "utterances")?;
    let audio_index: Vec<AudioMeta> = parse_lines(&index_bytes, "audio index")?;
    let mut motion_by_participant: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, p) in motion.iter().enumerate() {
        motion_by_participant.entry(p.participant_id.clone()).or_default().push(i);
    }
    Ok(Recording { dir: dir.to_path_buf(), manifest, motion, motion_by_participant, utterances, audio_index })
}

fn verify_shared(manifest: &RecordingManifest, kind: TrackKind, bytes: &[u8], field: &str) -> Result<(), RecorderError> {
    let (sums, orphans) = subset_checksums_with_orphans(bytes, field);
    let empty = hex::encode(Sha256::digest(b""));
    let mut listed = BTreeSet::new();
    for t in manifest.tracks.iter().filter(|t| t.kind == kind) {
        listed.insert(t.participant_id.as_str());
        let actual = sums.get(&t.participant_id).unwrap_or(&empty);
        if *actual != t.checksum {
            return Err(RecorderError::Integrity { track: format!("{}:{}", kind.label(), t.participant_id) });
        }
    }
    if orphans > 0 || sums.keys().any(|k| !listed.contains(k.as_str())) {
        return Err(RecorderError::Integrity { track: format!("{}:unattributed", kind.label()) });
    }
    Ok(())
}

fn parse_lines<T: serde::de::DeserializeOwned>(bytes: &[u8], what: &str) -> Result<Vec<T>, RecorderError> {
    bytes
        .split(|b| *b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_slice(l).map_err(|e| RecorderError::Corrupt(format!("{what}: {e}"))))
        .collect()
}

impl Recording {
    pub fn duration_ticks(&self) -> Tick {
        self.manifest.duration_ticks
    }

    pub fn motion(&self) -> &[PoseFrame] {
        &self.motion
    }

    pub fn utterances(&self) -> &[UtteranceEvent] {
        &self.utterances
    }

    pub fn audio_index(&self) -> &[AudioMeta] {
        &self.audio_index
    }

    /// Pose frames of one participant in tick order.
    pub fn poses_of<'a>(&'a self, participant_id: &str) -> impl Iterator<Item = &'a PoseFrame> + 'a {
        self.motion_by_participant
            .get(participant_id)
            .into_iter()
            .flat_map(move |idx| idx.iter().map(move |&i| &self.motion[i]))
    }

    /// Latest pose of `participant_id` with `frame.tick <= tick`.
    pub fn pose_at(&self, participant_id: &str, tick: Tick) -> Option<&PoseFrame> {
        let idx = self.motion_by_participant.get(participant_id)?;
        let pos = idx.partition_point(|&i| self.motion[i].tick <= tick);
        pos.checked_sub(1).map(|p| &self.motion[idx[p]])
    }

    /// PCM for `[from_tick, to_tick)` of one participant's audio track.
    pub fn audio_samples(&self, participant_id: &str, from_tick: Tick, to_tick: Tick) -> Result<Vec<i16>, RecorderError> {
        let track = self
            .manifest
            .track(participant_id, TrackKind::Audio)
            .ok_or_else(|| RecorderError::Argument(format!("no audio track for {participant_id}")))?;
        let path = self.dir.join(&track.path);
        let (sr, tr) = (self.manifest.audio_sample_rate, self.manifest.tick_rate);
        let to_tick = to_tick.min(self.manifest.duration_ticks);
        if from_tick >= to_tick {
            return Ok(Vec::new());
        }
        let start = sample_offset(from_tick, sr, tr);
        let len = (sample_offset(to_tick, sr, tr) - start) as usize;
        let f = BufReader::new(File::open(&path).map_err(io_err(&path))?);
        wav::read_range(f, start, len).map_err(wav_err(&path))
    }

    /// Every event in recording order, with PCM restored where it was sent.
    pub fn events(&self) -> Result<Vec<RecordedEvent>, RecorderError> {
        self.events_in(0, self.manifest.duration_ticks)
    }

    /// Events whose start tick lies in `[from, to)`.
    pub fn events_in(&self, from: Tick, to: Tick) -> Result<Vec<RecordedEvent>, RecorderError> {
        let mut out: Vec<RecordedEvent> = Vec::new();
        let in_range = |t: Tick| t >= from && t < to;
        out.extend(self.motion.iter().filter(|p| in_range(p.tick)).cloned().map(RecordedEvent::Pose));
        out.extend(self.utterances.iter().filter(|u| in_range(u.start_tick)).cloned().map(RecordedEvent::Utterance));

        let mut pcm_cache: BTreeMap<String, (Tick, Vec<i16>)> = BTreeMap::new();
        let (sr, tr) = (self.manifest.audio_sample_rate, self.manifest.tick_rate);
        for a in self.audio_index.iter().filter(|a| in_range(a.tick)) {
            let pcm = if a.pcm {
                let entry = match pcm_cache.entry(a.participant_id.clone()) {
                    std::collections::btree_map::Entry::Occupied(o) => o.into_mut(),
                    std::collections::btree_map::Entry::Vacant(v) => {
                        let samples = self.audio_samples(&a.participant_id, from, to)?;
                        v.insert((from, samples))
                    }
                };
                let base = sample_offset(entry.0, sr, tr);
                let s = (sample_offset(a.tick, sr, tr) - base) as usize;
                let e = (sample_offset(a.tick + 1, sr, tr) - base) as usize;
                Some(entry.1.get(s..e).ok_or_else(|| RecorderError::Corrupt("audio track shorter than index".into()))?.to_vec())
            } else {
                None
            };
            out.push(RecordedEvent::Audio(AudioChunk { tick: a.tick, participant_id: a.participant_id.clone(), rms: a.rms, pcm }));
        }
        crate::events::sort_events(&mut out);
        Ok(out)
    }
}
