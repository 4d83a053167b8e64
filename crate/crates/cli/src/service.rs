//! Operations shared by the command line and the HTTP API.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use seam_core::agent::{AudioRates, TtsClient};
use seam_core::model::{Meeting, Role, StandInConfig, Tick};
use seam_core::playback::{
    abridge, load_chain, splice, view_at, write_abridged, AbridgedTimeline, Contribution, ExtractiveSummarizer,
    LlmSummarizer, PlaybackError, SpliceOptions, Summarizer, View,
};
use seam_core::recorder::{load, Recording, RecordingManifest, MANIFEST_FILE};
use seam_core::store::{check_id, EntityStore, RecordingEntry};
use seam_core::wav;

use crate::config::Settings;
use crate::error::CliError;

/// Largest tick range served by one view request.
pub const MAX_VIEW_PAGE: Tick = 720;

/// Resolves a recording given as a directory path or a `<meeting>__<dir>` id.
pub fn resolve_recording(store: &EntityStore, reference: &str) -> Result<PathBuf, CliError> {
    let p = Path::new(reference);
    if p.join(MANIFEST_FILE).is_file() {
        return Ok(p.to_path_buf());
    }
    Ok(store.find_recording(reference)?.dir)
}

pub fn recording_id(store: &EntityStore, dir: &Path) -> Option<String> {
    let rel = dir.strip_prefix(store.recordings_dir()).ok()?;
    let mut parts = rel.iter();
    let meeting = parts.next()?.to_str()?;
    let name = parts.next()?.to_str()?;
    parts.next().is_none().then(|| format!("{meeting}__{name}"))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RecordingSummary {
    pub id: String,
    pub meeting_id: String,
    pub iteration_index: u32,
    pub duration_ticks: Tick,
    pub parent_iteration: Option<u32>,
    pub attendees: Vec<String>,
}

impl From<&RecordingEntry> for RecordingSummary {
    fn from(e: &RecordingEntry) -> Self {
        Self {
            id: e.id(),
            meeting_id: e.meeting_id.clone(),
            iteration_index: e.manifest.iteration_index,
            duration_ticks: e.manifest.duration_ticks,
            parent_iteration: e.manifest.parent_iteration,
            attendees: e.manifest.attendees.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ViewPage {
    pub from: Tick,
    pub to: Tick,
    pub duration_ticks: Tick,
    pub views: Vec<View>,
}

/// Views for ticks `[from, to)`. A range starting at the end of the
/// recording yields the single end-state view.
pub fn view_range(rec: &Recording, viewpoint: Option<&str>, from: Tick, to: Tick, samples: bool) -> Result<ViewPage, CliError> {
    if let Some(v) = viewpoint {
        if !rec.manifest.participant_ids().any(|id| id == v) {
            return Err(PlaybackError::UnknownViewpoint(v.to_string()).into());
        }
    }
    let duration = rec.duration_ticks();
    if from > duration {
        return Err(CliError::invalid(format!("from {from} beyond duration {duration}")));
    }
    if to <= from {
        return Err(CliError::invalid(format!("empty range [{from}, {to})")));
    }
    if to - from > MAX_VIEW_PAGE {
        return Err(CliError::invalid(format!("range longer than {MAX_VIEW_PAGE} ticks")));
    }
    let to = to.min(duration.max(from + 1));
    let views = (from..to).map(|t| view_at(rec, viewpoint, t, samples)).collect::<Result<Vec<_>, _>>()?;
    Ok(ViewPage { from, to, duration_ticks: duration, views })
}

/// `none` (or no value) selects the third-person view.
pub fn viewpoint_arg(v: Option<&str>) -> Option<&str> {
    v.filter(|v| !v.is_empty() && *v != "none")
}

/// A comment given by its media instead of captured events.
#[derive(Debug, Clone, Deserialize)]
pub struct CommentSpec {
    #[serde(default)]
    pub id: Option<String>,
    pub author_id: String,
    pub anchor_tick: Tick,
    #[serde(default)]
    pub text: Option<String>,
    /// Path to a 48 kHz mono 16-bit WAV file.
    #[serde(default)]
    pub wav: Option<PathBuf>,
    #[serde(default)]
    pub position: Option<[f32; 3]>,
    #[serde(default)]
    pub yaw: Option<f32>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum CommentInput {
    Captured(Contribution),
    Media(CommentSpec),
}

pub fn decode_voice(bytes: &[u8], rates: AudioRates) -> Result<Vec<i16>, CliError> {
    let w = wav::decode(bytes).map_err(|e| CliError::invalid(format!("audio: {e}")))?;
    if w.channels != 1 || w.bits_per_sample != 16 || w.sample_rate != rates.sample_rate {
        return Err(CliError::invalid(format!(
            "audio must be {} Hz mono 16-bit, got {} Hz, {} channels, {} bits",
            rates.sample_rate, w.sample_rate, w.channels, w.bits_per_sample
        )));
    }
    Ok(w.samples)
}

/// Builds a contribution from media, placing the commenter at `position`
/// (or the origin) facing the room centre.
#[allow(clippy::too_many_arguments)]
pub fn contribution_from_media(
    id: String,
    author: &str,
    anchor: Tick,
    seq: u64,
    samples: Option<&[i16]>,
    text: Option<&str>,
    position: Option<[f32; 3]>,
    yaw: Option<f32>,
    tts: Option<&Arc<dyn TtsClient>>,
    rates: AudioRates,
) -> Result<Contribution, CliError> {
    check_id(author)?;
    let position = position.unwrap_or([0.0; 3]);
    let yaw = yaw.unwrap_or_else(|| {
        if position[0] == 0.0 && position[2] == 0.0 {
            0.0
        } else {
            seam_core::agent::bearing(position, [0.0; 3])
        }
    });
    Ok(Contribution::from_media(id, author, anchor, seq, samples, text, position, yaw, tts, rates)?)
}

/// Pending comments for a recording, kept until they are spliced.
pub struct CommentStore {
    dir: PathBuf,
}

impl CommentStore {
    pub fn new(store: &EntityStore, recording_id: &str) -> Result<Self, CliError> {
        check_id(recording_id)?;
        Ok(Self { dir: store.root().join("contributions").join(recording_id) })
    }

    pub fn pending(&self) -> Result<Vec<Contribution>, CliError> {
        let rd = match fs::read_dir(&self.dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(CliError::io(format!("{}: {e}", self.dir.display()))),
        };
        let mut out = Vec::new();
        for entry in rd {
            let p = entry.map_err(|e| CliError::io(e.to_string()))?.path();
            if p.extension().is_some_and(|x| x == "json") {
                let text = fs::read_to_string(&p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
                let c: Contribution =
                    serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", p.display())))?;
                out.push(c);
            }
        }
        out.sort_by(|a, b| (a.anchor_tick, a.created_seq).cmp(&(b.anchor_tick, b.created_seq)));
        Ok(out)
    }

    pub fn next_seq(&self) -> Result<u64, CliError> {
        Ok(self.pending()?.iter().map(|c| c.created_seq + 1).max().unwrap_or(0))
    }

    pub fn add(&self, c: &Contribution) -> Result<(), CliError> {
        check_id(&c.contribution_id)?;
        fs::create_dir_all(&self.dir).map_err(|e| CliError::io(format!("{}: {e}", self.dir.display())))?;
        let path = self.dir.join(format!("{}.json", c.contribution_id));
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(c).expect("contributions serialize"))
            .and_then(|_| fs::rename(&tmp, &path))
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))
    }

    /// Moves spliced comments aside so they are not applied twice.
    pub fn archive(&self, into: &str) -> Result<(), CliError> {
        let done = self.dir.join("spliced").join(into);
        fs::create_dir_all(&done).map_err(|e| CliError::io(e.to_string()))?;
        for c in self.pending()? {
            let name = format!("{}.json", c.contribution_id);
            fs::rename(self.dir.join(&name), done.join(&name)).map_err(|e| CliError::io(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SpliceOutcome {
    pub id: Option<String>,
    pub recording_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: RecordingManifest,
}

pub fn splice_into_store(
    store: &EntityStore,
    source_dir: &Path,
    contributions: &[Contribution],
    options: SpliceOptions,
) -> Result<SpliceOutcome, CliError> {
    let source = load(source_dir)?;
    let (manifest, dir) = splice(&source, contributions, &store.recordings_dir(), options)?;
    Ok(SpliceOutcome { id: recording_id(store, &dir), manifest_path: dir.join(MANIFEST_FILE), recording_dir: dir, manifest })
}

#[derive(Debug, Clone, Serialize)]
pub struct AbridgeOutcome {
    pub path: PathBuf,
    pub timeline: AbridgedTimeline,
}

/// Abridges the chain ending at `head_dir` for `viewer` and writes it next to the chain.
pub fn abridge_chain(store: &EntityStore, settings: &Settings, head_dir: &Path, viewer: &str) -> Result<AbridgeOutcome, CliError> {
    let meeting_dir = head_dir.parent().ok_or_else(|| CliError::invalid("recording has no meeting directory"))?;
    let head = head_dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CliError::invalid("recording directory name is not UTF-8"))?;
    let chain = load_chain(meeting_dir, head)?;
    let meeting = store.load_meeting(&chain.last().expect("chain has a head").manifest.meeting_id)?;
    if meeting.participant(viewer).is_none() {
        return Err(CliError::not_found(format!("participant {viewer}")));
    }
    let summarizer: Box<dyn Summarizer> = match settings.llm() {
        Some(client) => Box::new(LlmSummarizer { client, deadline: seam_core::agent::clients::DEFAULT_DEADLINE }),
        None => Box::new(ExtractiveSummarizer),
    };
    let timeline = abridge(&chain, &meeting.agenda, viewer, summarizer.as_ref())?;
    let path = write_abridged(meeting_dir, &timeline)?;
    Ok(AbridgeOutcome { path, timeline })
}

/// Stored stand-in configs for absentees of `iteration`.
pub fn standins_for_iteration(store: &EntityStore, meeting: &Meeting, iteration: u32) -> Result<Vec<StandInConfig>, CliError> {
    let mut out = Vec::new();
    for c in store.standins_for(&meeting.meeting_id)? {
        if matches!(meeting.role_of(&c.absentee_id, iteration), Ok(Role::Absentee)) {
            out.push(c);
        }
    }
    Ok(out)
}
