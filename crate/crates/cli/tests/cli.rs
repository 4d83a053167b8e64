use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn seam(data_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seam"))
        .arg("--data-root")
        .arg(data_root)
        .args(args)
        .env_remove("SEAM_CONFIG")
        .env_remove("SEAM_LLM_URL")
        .env_remove("SEAM_TTS_URL")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("some output")).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("JSON error line");
    serde_json::from_str(line).expect("stderr error is JSON")
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = seam(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["code"], "usage");
    assert!(out.stdout.is_empty());
}

#[test]
fn missing_entities_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = seam(tmp.path(), &["meeting", "show", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["code"], "not_found");
    assert!(err["message"].as_str().unwrap().contains("nope"));
}

#[test]
fn unreadable_input_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = seam(tmp.path(), &["meeting", "create", "--file", "/definitely/not/here.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["code"], "io");
}

#[test]
fn meeting_and_standin_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let script: Value = serde_json::from_str(&std::fs::read_to_string(fixture("weekend.json")).unwrap()).unwrap();
    let meeting = tmp.path().join("meeting.json");
    std::fs::write(&meeting, script["meeting"].to_string()).unwrap();
    let standin = tmp.path().join("lee.json");
    std::fs::write(&standin, script["standins"][0].to_string()).unwrap();
    let data = tmp.path().join("data");

    let out = seam(&data, &["meeting", "create", "--file", meeting.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["meeting_id"], "weekend-trip");

    let out = seam(&data, &["standin", "config", "--meeting", "weekend-trip", "--file", standin.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let out = seam(&data, &["standin", "show", "--meeting", "weekend-trip", "--absentee", "lee"]);
    assert_eq!(stdout_json(&out), script["standins"][0]);

    let out = seam(&data, &["meeting", "list"]);
    assert_eq!(stdout_json(&out), serde_json::json!(["weekend-trip"]));

    // A stand-in for someone outside the meeting is rejected.
    let mut bad = script["standins"][0].clone();
    bad["absentee_id"] = "zed".into();
    std::fs::write(&standin, bad.to_string()).unwrap();
    let out = seam(&data, &["standin", "config", "--meeting", "weekend-trip", "--file", standin.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn golden_sim_then_export() {
    let tmp = tempfile::tempdir().unwrap();
    let out = seam(tmp.path(), &["sim", "run", fixture("weekend.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let result = stdout_json(&out);
    let manifest_path = PathBuf::from(result["manifest_path"].as_str().unwrap());
    assert!(manifest_path.is_file());
    assert!(manifest_path.starts_with(tmp.path()));
    assert_eq!(result["ticks"], 30240);
    assert_eq!(result["drop_counters"]["late"], 0);

    let out = seam(tmp.path(), &["playback", "export", "--viewpoint", "lee", "--from", "0", "--to", "72"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let page = stdout_json(&out);
    let views = page["views"].as_array().unwrap();
    assert_eq!(views.len(), 72);
    for (i, v) in views.iter().enumerate() {
        assert_eq!(v["tick"], i as u64);
    }

    let out = seam(tmp.path(), &["playback", "info"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["manifest"]["duration_ticks"], 30240);

    let out = seam(tmp.path(), &["playback", "export", "--viewpoint", "zed", "--to", "10"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["code"], "unknown_viewpoint");
}

#[test]
fn splice_and_abridge_from_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = seam(tmp.path(), &["sim", "run", fixture("quarterly_review.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rec = stdout_json(&out)["recording_id"].as_str().unwrap().to_string();

    let comments = tmp.path().join("comments.json");
    std::fs::write(&comments, r#"[{"author_id":"carol","anchor_tick":600,"text":"I can cover the backend role."}]"#).unwrap();
    let out = seam(tmp.path(), &["splice", "--rec", &rec, "--comments", comments.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let spliced = stdout_json(&out);
    assert_eq!(spliced["manifest"]["parent_iteration"], 1);
    assert_eq!(spliced["manifest"]["iteration_index"], 2);
    let head = spliced["id"].as_str().unwrap().to_string();

    let out = seam(tmp.path(), &["abridge", "--chain", &head, "--viewer", "carol"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let abridged = stdout_json(&out);
    assert!(Path::new(abridged["path"].as_str().unwrap()).is_file());
    assert_eq!(abridged["timeline"]["viewer_id"], "carol");
}

#[test]
fn failed_trace_assertion_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let expected = tmp.path().join("expected.json");
    std::fs::write(&expected, r#"{"expected":[{"from_tick":0,"to_tick":0,"event":"enter","state":"responding_generic"}]}"#).unwrap();
    let out = seam(tmp.path(), &["sim", "run", fixture("empty.json").to_str().unwrap(), "--assert", expected.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["assertion"]["passed"], false);
    assert_eq!(stderr_json(&out)["code"], "trace_divergence");
}

#[test]
fn version_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = seam(tmp.path(), &["--version"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("seam "));
}

#[test]
fn session_serve_records_until_empty() {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpStream;
    use std::process::Stdio;

    use seam_core::protocol::{encode_frame, Bye, FrameDecoder, Hello, Message};

    let tmp = tempfile::tempdir().unwrap();
    let script: Value = serde_json::from_str(&std::fs::read_to_string(fixture("weekend.json")).unwrap()).unwrap();
    let meeting = tmp.path().join("meeting.json");
    std::fs::write(&meeting, script["meeting"].to_string()).unwrap();
    let data = tmp.path().join("data");
    assert_eq!(seam(&data, &["meeting", "create", "--file", meeting.to_str().unwrap()]).status.code(), Some(0));

    let mut child = Command::new(env!("CARGO_BIN_EXE_seam"))
        .arg("--data-root")
        .arg(&data)
        .args(["session", "serve", "--meeting", "weekend-trip", "--iter", "1", "--port", "0", "--close-when-empty"])
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let listening: Value = serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap();
    let mut stream = TcpStream::connect(listening["listening"].as_str().unwrap()).unwrap();
    stream.write_all(&encode_frame(&Message::Hello(Hello { participant_id: "a".into(), display_name: "Avery".into() }))).unwrap();
    let mut decoder = FrameDecoder::default();
    let mut buf = [0u8; 4096];
    'welcome: loop {
        let n = stream.read(&mut buf).unwrap();
        assert!(n > 0, "closed before welcome");
        decoder.push(&buf[..n]);
        while let Some(m) = decoder.next_message().unwrap() {
            if matches!(m, Message::Welcome(_)) {
                break 'welcome;
            }
        }
    }
    stream.write_all(&encode_frame(&Message::Bye(Bye { participant_id: Some("a".into()), reason: None }))).unwrap();

    let status = child.wait().unwrap();
    assert_eq!(status.code(), Some(0));
    let done: Value = serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap();
    assert!(Path::new(done["manifest_path"].as_str().unwrap()).is_file());
    assert_eq!(done["attendees"], serde_json::json!(["a"]));
}
