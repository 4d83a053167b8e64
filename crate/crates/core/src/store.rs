//! File-backed persistence for meetings, profiles and stand-in configs, plus
//! lookup of recordings under the same data root.
//!
//! ```text
//! <data_root>/entities/meetings/<meeting_id>.json
//! <data_root>/entities/profiles/<participant_id>.json
//! <data_root>/entities/standins/<meeting_id>/<absentee_id>.json
//! <data_root>/recordings/<meeting_id>/<iteration>/...
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::model::{validate_meeting, validate_standin, Meeting, ParticipantProfile, StandInConfig, Violation, MIN_VOICE_SAMPLE_SECS};
use crate::recorder::{RecordingManifest, MANIFEST_FILE};
use crate::wav;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityKind {
    Meeting,
    Profile,
    StandInConfig,
}

impl EntityKind {
    fn dir(self) -> &'static str {
        match self {
            EntityKind::Meeting => "meetings",
            EntityKind::Profile => "profiles",
            EntityKind::StandInConfig => "standins",
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{kind:?} {id} not found")]
    NotFound { kind: EntityKind, id: String },
    #[error("validation failed: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("invalid id {0:?}")]
    BadId(String),
    #[error("corrupt entity {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Ids become file names, so anything that could escape the directory is refused.
pub fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && !id.starts_with('.')
        && id.chars().all(|c| !c.is_control() && !matches!(c, '/' | '\\' | ':'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::BadId(id.to_string()))
    }
}

/// A recording found on disk, keyed by its directory name.
#[derive(Debug, Clone)]
pub struct RecordingEntry {
    pub meeting_id: String,
    pub dir_name: String,
    pub dir: PathBuf,
    pub manifest: RecordingManifest,
}

impl RecordingEntry {
    /// Stable id used by the HTTP API.
    pub fn id(&self) -> String {
        format!("{}__{}", self.meeting_id, self.dir_name)
    }
}

#[derive(Debug)]
pub struct EntityStore {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl EntityStore {
    pub fn open(data_root: impl Into<PathBuf>) -> Self {
        Self { root: data_root.into(), write_lock: Mutex::new(()) }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn recordings_dir(&self) -> PathBuf {
        self.root.join("recordings")
    }

    fn entity_path(&self, kind: EntityKind, scope: Option<&str>, id: &str) -> Result<PathBuf, StoreError> {
        check_id(id)?;
        let mut p = self.root.join("entities").join(kind.dir());
        if let Some(s) = scope {
            check_id(s)?;
            p.push(s);
        }
        p.push(format!("{id}.json"));
        Ok(p)
    }

    fn write<T: Serialize>(&self, path: &Path, value: &T) -> Result<(), StoreError> {
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let parent = path.parent().expect("entity paths have a parent");
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        let mut text = serde_json::to_string_pretty(value).expect("entities serialize");
        text.push('\n');
        let tmp = path.with_extension("json.tmp");
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(text.as_bytes()).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    fn read<T: DeserializeOwned>(&self, kind: EntityKind, id: &str, path: &Path) -> Result<T, StoreError> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound { kind, id: id.to_string() })
            }
            Err(e) => return Err(StoreError::Io { path: path.to_path_buf(), source: e }),
        };
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt { path: path.to_path_buf(), message: e.to_string() })
    }

    fn list_dir(dir: &Path) -> Result<Vec<String>, StoreError> {
        let rd = match fs::read_dir(dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(StoreError::Io { path: dir.to_path_buf(), source: e }),
        };
        let mut ids = Vec::new();
        for entry in rd {
            let entry = entry.map_err(io_err(dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".json") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn store_meeting(&self, meeting: &Meeting) -> Result<(), StoreError> {
        let violations = validate_meeting(meeting);
        if !violations.is_empty() {
            return Err(StoreError::Invalid(violations));
        }
        let path = self.entity_path(EntityKind::Meeting, None, &meeting.meeting_id)?;
        self.write(&path, meeting)
    }

    pub fn load_meeting(&self, id: &str) -> Result<Meeting, StoreError> {
        let path = self.entity_path(EntityKind::Meeting, None, id)?;
        self.read(EntityKind::Meeting, id, &path)
    }

    pub fn list_meetings(&self) -> Result<Vec<String>, StoreError> {
        Self::list_dir(&self.root.join("entities").join(EntityKind::Meeting.dir()))
    }

    /// Resolves a voice sample reference against the data root.
    pub fn resolve_ref(&self, reference: &str) -> PathBuf {
        let p = Path::new(reference);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn store_profile(&self, profile: &ParticipantProfile) -> Result<(), StoreError> {
        let mut violations = Vec::new();
        if let Some(r) = &profile.voice_sample_ref {
            match wav::duration_secs(&self.resolve_ref(r)) {
                Ok(secs) if secs + 1e-9 >= MIN_VOICE_SAMPLE_SECS => {}
                Ok(secs) => violations.push(Violation::new(
                    "voice_sample_ref",
                    format!("voice sample is {secs:.2} s, at least {MIN_VOICE_SAMPLE_SECS} s required"),
                )),
                Err(e) => violations.push(Violation::new("voice_sample_ref", format!("unreadable WAV: {e}"))),
            }
        }
        if !violations.is_empty() {
            return Err(StoreError::Invalid(violations));
        }
        let path = self.entity_path(EntityKind::Profile, None, &profile.participant_id)?;
        self.write(&path, profile)
    }

    pub fn load_profile(&self, id: &str) -> Result<ParticipantProfile, StoreError> {
        let path = self.entity_path(EntityKind::Profile, None, id)?;
        self.read(EntityKind::Profile, id, &path)
    }

    /// Validates against the stored meeting before writing.
    pub fn store_standin(&self, meeting_id: &str, config: &StandInConfig) -> Result<(), StoreError> {
        let meeting = self.load_meeting(meeting_id)?;
        let violations = validate_standin(config, &meeting);
        if !violations.is_empty() {
            return Err(StoreError::Invalid(violations));
        }
        let path = self.entity_path(EntityKind::StandInConfig, Some(meeting_id), &config.absentee_id)?;
        self.write(&path, config)
    }

    pub fn load_standin(&self, meeting_id: &str, absentee_id: &str) -> Result<StandInConfig, StoreError> {
        let path = self.entity_path(EntityKind::StandInConfig, Some(meeting_id), absentee_id)?;
        self.read(EntityKind::StandInConfig, &format!("{meeting_id}/{absentee_id}"), &path)
    }

    pub fn standins_for(&self, meeting_id: &str) -> Result<Vec<StandInConfig>, StoreError> {
        check_id(meeting_id)?;
        let dir = self.root.join("entities").join(EntityKind::StandInConfig.dir()).join(meeting_id);
        Self::list_dir(&dir)?.iter().map(|id| self.load_standin(meeting_id, id)).collect()
    }

    /// Every finalized recording, ordered by meeting then directory name.
    pub fn list_recordings(&self) -> Result<Vec<RecordingEntry>, StoreError> {
        let base = self.recordings_dir();
        let mut out = Vec::new();
        for meeting_id in sorted_subdirs(&base)? {
            for dir_name in sorted_subdirs(&base.join(&meeting_id))? {
                let dir = base.join(&meeting_id).join(&dir_name);
                let path = dir.join(MANIFEST_FILE);
                let Ok(text) = fs::read_to_string(&path) else { continue };
                let manifest = serde_json::from_str(&text)
                    .map_err(|e| StoreError::Corrupt { path: path.clone(), message: e.to_string() })?;
                out.push(RecordingEntry { meeting_id: meeting_id.clone(), dir_name, dir, manifest });
            }
        }
        Ok(out)
    }

    /// Looks up a recording by its `<meeting>__<dir>` id.
    pub fn find_recording(&self, id: &str) -> Result<RecordingEntry, StoreError> {
        let not_found = || StoreError::NotFound { kind: EntityKind::Meeting, id: format!("recording {id}") };
        let (meeting_id, dir_name) = id.rsplit_once("__").ok_or_else(not_found)?;
        check_id(meeting_id)?;
        check_id(dir_name)?;
        let dir = self.recordings_dir().join(meeting_id).join(dir_name);
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|_| not_found())?;
        let manifest =
            serde_json::from_str(&text).map_err(|e| StoreError::Corrupt { path: path.clone(), message: e.to_string() })?;
        Ok(RecordingEntry { meeting_id: meeting_id.into(), dir_name: dir_name.into(), dir, manifest })
    }
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<String>, StoreError> {
    let rd = match fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(StoreError::Io { path: dir.to_path_buf(), source: e }),
    };
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(io_err(dir))?;
        if entry.path().is_dir() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}
