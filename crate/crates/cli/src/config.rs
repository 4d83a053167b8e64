//! Settings resolved as flags, then environment, then config file, then defaults.
//! Clap reads the first two; this module layers the file underneath.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use seam_core::agent::{LlmClient, TtsClient};
use seam_core::session::SessionOptions;

use crate::error::CliError;

pub const DEFAULT_DATA_ROOT: &str = "./seam-data";
pub const DEFAULT_PORT: u16 = 7400;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data_root: Option<PathBuf>,
    pub port: Option<u16>,
    #[serde(default)]
    pub clients: ClientConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub llm_url: Option<String>,
    pub tts_url: Option<String>,
    pub stt_url: Option<String>,
    pub api_key: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
    }
}

/// Values that survived flag and environment parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data_root: Option<PathBuf>,
    pub port: Option<u16>,
    pub llm_url: Option<String>,
    pub tts_url: Option<String>,
    pub api_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub data_root: PathBuf,
    pub port: u16,
    pub clients: ClientConfig,
}

impl Settings {
    pub fn resolve(overrides: Overrides, file: Option<FileConfig>) -> Self {
        let file = file.unwrap_or_default();
        Self {
            data_root: overrides.data_root.or(file.data_root).unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_ROOT)),
            port: overrides.port.or(file.port).unwrap_or(DEFAULT_PORT),
            clients: ClientConfig {
                llm_url: overrides.llm_url.or(file.clients.llm_url),
                tts_url: overrides.tts_url.or(file.clients.tts_url),
                stt_url: file.clients.stt_url,
                api_key: overrides.api_key.or(file.clients.api_key),
            },
        }
    }

    pub fn llm(&self) -> Option<Arc<dyn LlmClient>> {
        let url = self.clients.llm_url.as_ref()?;
        let ep = seam_core::agent::clients::Endpoint::new(url, self.clients.api_key.clone());
        Some(Arc::new(seam_core::agent::clients::HttpLlmClient(ep)))
    }

    pub fn tts(&self) -> Option<Arc<dyn TtsClient>> {
        let url = self.clients.tts_url.as_ref()?;
        let ep = seam_core::agent::clients::Endpoint::new(url, self.clients.api_key.clone());
        Some(Arc::new(seam_core::agent::clients::HttpTtsClient(ep)))
    }

    pub fn session_options(&self) -> SessionOptions {
        SessionOptions { llm: self.llm(), tts: self.tts(), ..SessionOptions::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: FileConfig = toml::from_str("data_root = \"/from/file\"\nport = 9000\n[clients]\nllm_url = \"http://llm\"\n").unwrap();
        let s = Settings::resolve(Overrides { port: Some(1234), ..Overrides::default() }, Some(file.clone()));
        assert_eq!(s.data_root, PathBuf::from("/from/file"));
        assert_eq!(s.port, 1234);
        assert_eq!(s.clients.llm_url.as_deref(), Some("http://llm"));
        let s = Settings::resolve(Overrides::default(), None);
        assert_eq!((s.data_root, s.port), (PathBuf::from(DEFAULT_DATA_ROOT), DEFAULT_PORT));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("colour = 1").is_err());
    }

    #[test]
    fn no_clients_by_default() {
        let s = Settings::resolve(Overrides::default(), None);
        let o = s.session_options();
        assert!(o.llm.is_none() && o.tts.is_none());
    }
}
