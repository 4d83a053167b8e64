//! External speech and language services. All of them are optional; every
//! caller has a deterministic offline path when a client is absent or fails.

use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DEADLINE: Duration = Duration::from_millis(2000);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("deadline exceeded")]
    Timeout,
    #[error("transport: {0}")]
    Transport(String),
    #[error("bad response: {0}")]
    BadResponse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub system: String,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmReply {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SttWord {
    pub w: String,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SttResponse {
    pub transcript: String,
    #[serde(default)]
    pub words: Vec<SttWord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtsRequest {
    pub text: String,
    pub voice_ref: String,
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<LlmReply, ClientError>;
}

pub trait SttClient: Send + Sync {
    /// `wav` is a complete WAV file body.
    fn transcribe(&self, wav: &[u8]) -> Result<SttResponse, ClientError>;
}

pub trait TtsClient: Send + Sync {
    /// Returns a WAV file body.
    fn synthesize(&self, request: &TtsRequest) -> Result<Vec<u8>, ClientError>;
}

/// Runs `f` on a helper thread and gives up after `deadline`. A late result
/// is discarded when the helper eventually finishes.
pub fn with_deadline<T, F>(deadline: Duration, f: F) -> Result<T, ClientError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ClientError> + Send + 'static,
{
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let _ = tx.send(f());
    });
    match rx.recv_timeout(deadline) {
        Ok(r) => r,
        Err(mpsc::RecvTimeoutError::Timeout) => Err(ClientError::Timeout),
        Err(mpsc::RecvTimeoutError::Disconnected) => Err(ClientError::Transport("client thread panicked".into())),
    }
}

pub fn llm_with_deadline(client: &Arc<dyn LlmClient>, request: LlmRequest, deadline: Duration) -> Result<LlmReply, ClientError> {
    let client = Arc::clone(client);
    with_deadline(deadline, move || client.complete(&request))
}

pub fn stt_with_deadline(client: &Arc<dyn SttClient>, wav: Vec<u8>, deadline: Duration) -> Result<SttResponse, ClientError> {
    let client = Arc::clone(client);
    with_deadline(deadline, move || client.transcribe(&wav))
}

pub fn tts_with_deadline(client: &Arc<dyn TtsClient>, request: TtsRequest, deadline: Duration) -> Result<Vec<u8>, ClientError> {
    let client = Arc::clone(client);
    with_deadline(deadline, move || client.synthesize(&request))
}

#[cfg(feature = "http-clients")]
pub use http::{HttpLlmClient, HttpSttClient, HttpTtsClient};

#[cfg(feature = "http-clients")]
mod http {
    use std::time::Duration;

    use super::*;

    fn agent(timeout: Duration) -> ureq::Agent {
        ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into()
    }

    fn transport(e: ureq::Error) -> ClientError {
        match e {
            ureq::Error::Timeout(_) => ClientError::Timeout,
            other => ClientError::Transport(other.to_string()),
        }
    }

    #[derive(Debug, Clone)]
    pub struct Endpoint {
        pub url: String,
        pub api_key: Option<String>,
        pub timeout: Duration,
    }

    impl Endpoint {
        pub fn new(url: impl Into<String>, api_key: Option<String>) -> Self {
            Self { url: url.into(), api_key, timeout: DEFAULT_DEADLINE }
        }

        fn post(&self) -> ureq::RequestBuilder<ureq::typestate::WithBody> {
            let req = agent(self.timeout).post(&self.url);
            match &self.api_key {
                Some(key) => req.header("Authorization", &format!("Bearer {key}")),
                None => req,
            }
        }
    }

    /// POST `{"system","messages"}` and read back `{"text"}`.
    #[derive(Debug, Clone)]
    pub struct HttpLlmClient(pub Endpoint);

    impl LlmClient for HttpLlmClient {
        fn complete(&self, request: &LlmRequest) -> Result<LlmReply, ClientError> {
            let mut resp = self.0.post().send_json(request).map_err(transport)?;
            resp.body_mut().read_json::<LlmReply>().map_err(|e| ClientError::BadResponse(e.to_string()))
        }
    }

    /// POST a WAV body and read back the transcript JSON.
    #[derive(Debug, Clone)]
    pub struct HttpSttClient(pub Endpoint);

    impl SttClient for HttpSttClient {
        fn transcribe(&self, wav: &[u8]) -> Result<SttResponse, ClientError> {
            let mut resp = self.0.post().header("Content-Type", "audio/wav").send(wav).map_err(transport)?;
            resp.body_mut().read_json::<SttResponse>().map_err(|e| ClientError::BadResponse(e.to_string()))
        }
    }

    /// POST `{"text","voice_ref"}` and read back a WAV body.
    #[derive(Debug, Clone)]
    pub struct HttpTtsClient(pub Endpoint);

    impl TtsClient for HttpTtsClient {
        fn synthesize(&self, request: &TtsRequest) -> Result<Vec<u8>, ClientError> {
            let mut resp = self.0.post().send_json(request).map_err(transport)?;
            resp.body_mut()
                .with_config()
                .limit(64 * 1024 * 1024)
                .read_to_vec()
                .map_err(|e| ClientError::BadResponse(e.to_string()))
        }
    }
}

#[cfg(feature = "http-clients")]
pub use http::Endpoint;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deadline_discards_slow_calls() {
        let r: Result<u32, _> = with_deadline(Duration::from_millis(20), || {
            thread::sleep(Duration::from_millis(200));
            Ok(1)
        });
        assert_eq!(r, Err(ClientError::Timeout));
        assert_eq!(with_deadline(Duration::from_millis(500), || Ok(7)), Ok(7));
    }
}
