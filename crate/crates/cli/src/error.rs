use std::fmt;

use serde::Serialize;
use thiserror::Error;

use seam_core::playback::PlaybackError;
use seam_core::recorder::RecorderError;
use seam_core::session::SessionError;
use seam_core::sim::SimError;
use seam_core::store::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    NotFound,
    Invalid,
    Conflict,
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::NotFound | ErrorKind::Invalid | ErrorKind::Conflict => 2,
            ErrorKind::Io => 3,
        }
    }

    pub fn http_status(self) -> u16 {
        match self {
            ErrorKind::Usage | ErrorKind::Invalid => 400,
            ErrorKind::NotFound => 404,
            ErrorKind::Conflict => 409,
            ErrorKind::Io => 500,
        }
    }
}

#[derive(Debug, Error)]
pub struct CliError {
    pub kind: ErrorKind,
    pub code: &'static str,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

/// The `{code, message}` body shared by stderr output and HTTP errors.
#[derive(Debug, Serialize)]
pub struct ErrorBody<'a> {
    pub code: &'a str,
    pub message: &'a str,
}

impl CliError {
    pub fn new(kind: ErrorKind, code: &'static str, message: impl Into<String>) -> Self {
        Self { kind, code, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, "usage", message)
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Invalid, "invalid", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::NotFound, "not_found", message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Io, "io", message)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ErrorBody { code: self.code, message: &self.message }).expect("error body serializes")
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        let kind = match &e {
            StoreError::NotFound { .. } => ErrorKind::NotFound,
            StoreError::Invalid(_) | StoreError::BadId(_) | StoreError::Corrupt { .. } => ErrorKind::Invalid,
            StoreError::Io { .. } => ErrorKind::Io,
        };
        let code = match &e {
            StoreError::NotFound { .. } => "not_found",
            StoreError::Invalid(_) => "validation",
            StoreError::BadId(_) => "bad_id",
            StoreError::Corrupt { .. } => "corrupt",
            StoreError::Io { .. } => "io",
        };
        Self::new(kind, code, e.to_string())
    }
}

impl From<RecorderError> for CliError {
    fn from(e: RecorderError) -> Self {
        match &e {
            RecorderError::Io { .. } => Self::io(e.to_string()),
            RecorderError::Integrity { .. } => Self::new(ErrorKind::Invalid, "integrity", e.to_string()),
            _ => Self::new(ErrorKind::Invalid, "recording", e.to_string()),
        }
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Recorder(r) => r.into(),
            SessionError::AlreadyJoined(_) => Self::new(ErrorKind::Conflict, e.code(), e.to_string()),
            other => Self::new(ErrorKind::Invalid, other.code(), other.to_string()),
        }
    }
}

impl From<PlaybackError> for CliError {
    fn from(e: PlaybackError) -> Self {
        let (kind, code) = match &e {
            PlaybackError::Recorder(_) => {
                let PlaybackError::Recorder(r) = e else { unreachable!() };
                return r.into();
            }
            PlaybackError::UnknownViewpoint(_) => (ErrorKind::NotFound, "unknown_viewpoint"),
            PlaybackError::State(_) => (ErrorKind::Conflict, "state"),
            PlaybackError::EmptyContribution => (ErrorKind::Invalid, "empty_contribution"),
            PlaybackError::InvalidContribution(_) => (ErrorKind::Invalid, "invalid_contribution"),
            PlaybackError::AuthorRole(..) => (ErrorKind::Invalid, "author_role"),
            PlaybackError::Chain(_) => (ErrorKind::Invalid, "chain"),
        };
        Self::new(kind, code, e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Session(s) => s.into(),
            SimError::Io { .. } => Self::io(e.to_string()),
            SimError::Script(_) | SimError::Parse(_) => Self::new(ErrorKind::Invalid, "script", e.to_string()),
            SimError::Protocol(_) => Self::new(ErrorKind::Invalid, "protocol", e.to_string()),
        }
    }
}
