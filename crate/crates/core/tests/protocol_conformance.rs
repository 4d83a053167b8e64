use std::collections::BTreeSet;
use std::path::PathBuf;

use seam_core::protocol::{decode, encode, encode_frame, FrameDecoder, Message};

fn lines() -> Vec<String> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/protocol_conformance.jsonl");
    std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn fixture_covers_every_message_type() {
    let types: BTreeSet<String> = lines().iter().map(|l| decode(l).unwrap().type_name().to_string()).collect();
    let want: BTreeSet<String> =
        ["hello", "welcome", "roster_update", "pose", "audio", "utterance", "standin_action", "error", "bye"]
            .into_iter()
            .map(String::from)
            .collect();
    assert_eq!(types, want);
}

#[test]
fn fixture_lines_reencode_byte_for_byte() {
    for line in lines() {
        let m = decode(&line).unwrap();
        let again: serde_json::Value = serde_json::from_str(&encode(&m)).unwrap();
        let orig: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(again, orig, "{line}");
    }
}

#[test]
fn audio_pcm_is_little_endian_base64() {
    let line = lines().into_iter().find(|l| l.contains("\"audio\"")).unwrap();
    match decode(&line).unwrap() {
        Message::Audio(a) => assert_eq!(a.pcm.unwrap(), vec![0, 0x7fff, -0x8000]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn frames_survive_arbitrary_chunking() {
    let msgs: Vec<Message> = lines().iter().map(|l| decode(l).unwrap()).collect();
    let stream: Vec<u8> = msgs.iter().flat_map(encode_frame).collect();
    for chunk in [1, 3, 7, 64, stream.len()] {
        let mut d = FrameDecoder::default();
        let mut got = Vec::new();
        for piece in stream.chunks(chunk) {
            d.push(piece);
            while let Some(m) = d.next_message().unwrap() {
                got.push(m);
            }
        }
        assert_eq!(got, msgs, "chunk size {chunk}");
    }
}

#[test]
fn frame_prefix_is_big_endian_length() {
    let m = decode(&lines()[0]).unwrap();
    let f = encode_frame(&m);
    let n = u32::from_be_bytes([f[0], f[1], f[2], f[3]]) as usize;
    assert_eq!(n, f.len() - 4);
    assert_eq!(std::str::from_utf8(&f[4..]).unwrap(), encode(&m));
}

#[test]
fn wrong_version_is_rejected() {
    assert!(decode(r#"{"v":2,"type":"bye","body":{}}"#).is_err());
    assert!(decode(r#"{"v":1,"type":"shout","body":{}}"#).is_err());
}
