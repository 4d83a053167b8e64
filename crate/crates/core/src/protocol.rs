//! Session wire protocol: versioned JSON envelopes, length-delimited on byte streams.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentAction;
use crate::events::{AudioChunk, PoseFrame, UtteranceEvent};
use crate::model::Tick;

pub const PROTOCOL_VERSION: u32 = 1;
/// Upper bound on a single frame, to reject garbage length prefixes.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unsupported protocol version {0}")]
    Version(u32),
    #[error("frame of {0} bytes exceeds limit")]
    FrameTooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub participant_id: String,
    pub display_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub participant_id: String,
    pub display_name: String,
    pub standin: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Welcome {
    pub tick_rate: u32,
    pub current_tick: Tick,
    pub roster: Vec<RosterEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterUpdate {
    pub roster: Vec<RosterEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandinAction {
    pub tick: Tick,
    pub participant_id: String,
    pub action: AgentAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bye {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participant_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body", rename_all = "snake_case")]
pub enum Message {
    Hello(Hello),
    Welcome(Welcome),
    RosterUpdate(RosterUpdate),
    Pose(PoseFrame),
    Audio(AudioChunk),
    Utterance(UtteranceEvent),
    StandinAction(StandinAction),
    Error(ErrorBody),
    Bye(Bye),
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Hello(_) => "hello",
            Message::Welcome(_) => "welcome",
            Message::RosterUpdate(_) => "roster_update",
            Message::Pose(_) => "pose",
            Message::Audio(_) => "audio",
            Message::Utterance(_) => "utterance",
            Message::StandinAction(_) => "standin_action",
            Message::Error(_) => "error",
            Message::Bye(_) => "bye",
        }
    }

    pub fn error(code: impl Into<String>, message: impl Into<String>) -> Self {
        Message::Error(ErrorBody { code: code.into(), message: message.into() })
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    v: u32,
    #[serde(flatten)]
    message: M,
}

/// Serializes to the `{"v":1,"type":...,"body":{...}}` text form.
pub fn encode(message: &Message) -> String {
    serde_json::to_string(&Envelope { v: PROTOCOL_VERSION, message }).expect("messages always serialize")
}

pub fn decode(text: &str) -> Result<Message, ProtocolError> {
    let env: Envelope<Message> = serde_json::from_str(text)?;
    if env.v != PROTOCOL_VERSION {
        return Err(ProtocolError::Version(env.v));
    }
    Ok(env.message)
}

/// One frame: 4-byte big-endian length followed by the UTF-8 JSON payload.
pub fn encode_frame(message: &Message) -> Vec<u8> {
    let body = encode(message);
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body.as_bytes());
    out
}

pub fn write_frame<W: Write>(w: &mut W, message: &Message) -> Result<(), ProtocolError> {
    w.write_all(&encode_frame(message))?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Message>, ProtocolError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::FrameTooLarge(len));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    let text = String::from_utf8(buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    decode(&text).map(Some)
}

/// Splits complete frames off the front of a buffer, for incremental readers.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn next_message(&mut self) -> Result<Option<Message>, ProtocolError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes([self.buf[0], self.buf[1], self.buf[2], self.buf[3]]) as usize;
        if len > MAX_FRAME_LEN {
            return Err(ProtocolError::FrameTooLarge(len));
        }
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let frame: Vec<u8> = self.buf.drain(..4 + len).skip(4).collect();
        let text = String::from_utf8(frame).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        decode(&text).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_shape() {
        let m = Message::Hello(Hello { participant_id: "a".into(), display_name: "Alice".into() });
        assert_eq!(encode(&m), r#"{"v":1,"type":"hello","body":{"participant_id":"a","display_name":"Alice"}}"#);
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn rejects_other_versions() {
        let err = decode(r#"{"v":2,"type":"bye","body":{}}"#).unwrap_err();
        assert!(matches!(err, ProtocolError::Version(2)));
    }

    #[test]
    fn frames_split_across_reads() {
        let a = Message::Bye(Bye { participant_id: Some("a".into()), reason: None });
        let b = Message::error("late", "dropped");
        let mut bytes = encode_frame(&a);
        bytes.extend(encode_frame(&b));
        let mut dec = FrameDecoder::default();
        let (head, tail) = bytes.split_at(7);
        dec.push(head);
        assert!(dec.next_message().unwrap().is_none());
        dec.push(tail);
        assert_eq!(dec.next_message().unwrap(), Some(a));
        assert_eq!(dec.next_message().unwrap(), Some(b));
        assert!(dec.next_message().unwrap().is_none());

        let mut cursor = io::Cursor::new(bytes);
        assert!(read_frame(&mut cursor).unwrap().is_some());
        assert!(read_frame(&mut cursor).unwrap().is_some());
        assert!(read_frame(&mut cursor).unwrap().is_none());
    }
}
