//! The stand-in agent: speaker detection, addressing and classification,
//! response planning, the behaviour state machine, and speech I/O.

pub mod classify;
pub mod clients;
pub mod machine;
pub mod speaker;
pub mod speech;

pub use classify::{angle_between, bearing, classify, classify_text, is_addressed, normalize_yaw, tokenize, Classification};
pub use clients::{ClientError, LlmClient, SttClient, TtsClient};
pub use machine::{
    plan_response, Agent, AgentAction, AgentParams, AgentState, HeardUtterance, Responder, StateLabel, StepInputs,
    TraceEntry, TraceEvent,
};
pub use speaker::{detect_speaker, SpeakerEstimate, SpeakerParams};
pub use speech::{synthesize_speech, transcribe, AudioRates, AudioWindow, SpeechOutput};
