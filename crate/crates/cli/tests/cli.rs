use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn scb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scb")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(scb(&["--help"]).status.code(), Some(0));
    assert_eq!(scb(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(scb(&["stream", "--model", "m.scbm", "--source", "tape:x"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = scb(&["train", "--data", s(&missing), "--out", s(&dir.path().join("m.scbm"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn small_cohort_round_trip_and_serve() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("m.scbm");
    assert!(scb(&["synth", "--subjects", "2", "--trials", "6", "--seed", "3", "--out", s(&data)]).status.success());
    for i in 0..2 {
        assert!(data.join(format!("subject_{i:02}.eeg")).exists());
        assert!(data.join(format!("subject_{i:02}.csv")).exists());
    }
    let out = scb(&["train", "--data", s(&data), "--out", s(&model), "--epochs", "2", "--rounds", "10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&std::fs::read(model.with_extension("json")).unwrap()).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() >= 0.0);

    let stats = dir.path().join("stats.json");
    let replay = format!("replay:{}", s(&data.join("subject_00.eeg")));
    let out = scb(&["stream", "--model", s(&model), "--source", &replay, "--max-speed", "--out", s(&stats)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let st: Value = serde_json::from_slice(&std::fs::read(&stats).unwrap()).unwrap();
    assert!(st["decisions"].as_u64().unwrap() > 0);
    assert_eq!(st["drops"].as_u64(), Some(0));

    let mut child = Command::new(env!("CARGO_BIN_EXE_scb"))
        .args(["stream", "--model", s(&model), "--source", "synth-live", "--serve", "127.0.0.1:0", "--mode", "idle"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let url = loop {
        let line = lines.next().expect("server exited").unwrap();
        if let Some(rest) = line.strip_prefix("serving session on ") {
            break rest.to_string();
        }
    };
    let (mut ws, _) = tungstenite::connect(url.as_str()).unwrap();
    let hello: Value = serde_json::from_str(ws.read().unwrap().to_text().unwrap()).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(hello["type"], "hello");
    assert_eq!(hello["mode"], "idle");
    assert_eq!(hello["sample_rate"].as_f64(), Some(250.0));
}
