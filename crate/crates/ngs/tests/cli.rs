use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ngs_core::audio::read_wav;
use ngs_core::synthetic::{drum_corpus, write_corpus, DRUM_CLASSES};
use serde_json::{json, Value};

fn ngs(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ngs"))
        .args(args)
        .current_dir(cwd)
        .env_remove("NGS_CHECKPOINT")
        .output()
        .unwrap()
}

fn last_json(text: &[u8]) -> Value {
    let text = String::from_utf8_lossy(text);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("a JSON line");
    serde_json::from_str(line).unwrap()
}

fn failure_kind(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    last_json(&out.stderr)["error"].as_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ngs(&[], dir.path()).status.code(), Some(2));
    assert_eq!(ngs(&["sample", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(ngs(&["interp"], dir.path()).status.code(), Some(2));
    assert_eq!(ngs(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_errors_end_with_a_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = ngs(&["sample", "--out", "x.wav"], dir.path());
    assert_eq!(failure_kind(&out), "error");
    let out = ngs(&["--checkpoint", "absent", "sample", "--out", "x.wav"], dir.path());
    assert_eq!(failure_kind(&out), "checkpoint");
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = ngs(&["extract", "--root", "empty"], dir.path());
    assert_eq!(failure_kind(&out), "empty_corpus");
}

#[test]
fn extract_train_eval_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("drums");
    write_corpus(&root, &drum_corpus(16000, 0.25, 2, 9), &DRUM_CLASSES, 16000).unwrap();
    let config = json!({
        "grain": {"grain_size": 256, "overlap_ratio": 0.75, "sample_rate": 16000, "seq_len": 4},
        "model": {
            "latent_dim": 4, "embedding_dim": 6, "encoder_channels": [4, 8],
            "encoder_hidden": 16, "decoder_hidden": 16, "temporal_hidden": 8
        },
        "train": {"batch_size": 4, "steps_per_epoch": 4, "checkpoint_every": 0},
        "conditional": true
    });
    fs::write(dir.path().join("run.json"), config.to_string()).unwrap();
    let cwd = dir.path();

    let out = ngs(
        &["--config", "run.json", "--out", "m.json", "extract", "--root", "drums", "--test-fraction", "0.25"],
        cwd,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = last_json(&out.stdout);
    assert_eq!(summary["entries"], 16);
    assert_eq!(summary["test"], 4);
    assert_eq!(summary["labels"], json!(DRUM_CLASSES));

    let out = ngs(
        &["--config", "run.json", "--checkpoint", "ck", "--seed", "3", "train", "--manifest", "m.json", "--steps", "3", "--temporal-steps", "2"],
        cwd,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(cwd.join("ck").is_dir());

    let out = ngs(&["--checkpoint", "ck", "eval", "--manifest", "m.json", "--json"], cwd);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["items"].as_array().unwrap().len(), 4);
    let out = ngs(&["--checkpoint", "ck", "eval", "--manifest", "m.json"], cwd);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("LSD"));

    let chunk = 3 * 64 + 256;
    let out = ngs(&["--checkpoint", "ck", "--out", "s.wav", "sample", "--class", "Snare"], cwd);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_wav(cwd.join("s.wav")).unwrap().samples.len(), chunk);
    let out = ngs(&["--checkpoint", "ck", "--out", "s.wav", "sample", "--class", "Theremin"], cwd);
    assert_eq!(failure_kind(&out), "unknown_label");
    let out = ngs(&["--checkpoint", "ck", "--out", "s.wav", "sample"], cwd);
    assert_eq!(failure_kind(&out), "missing_condition");

    fs::write(
        cwd.join("path.json"),
        json!({"kind": "linear", "num_points": 9}).to_string(),
    )
    .unwrap();
    let out = ngs(&["--checkpoint", "ck", "--out", "p.wav", "path", "--spec", "path.json", "--class", "0"], cwd);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(last_json(&out.stdout)["samples"], 3 * chunk);
    assert_eq!(read_wav(cwd.join("p.wav")).unwrap().samples.len(), 3 * chunk);
    fs::write(cwd.join("bad.json"), json!({"kind": "linear"}).to_string()).unwrap();
    let out = ngs(&["--checkpoint", "ck", "--out", "p.wav", "path", "--spec", "bad.json", "--class", "0"], cwd);
    assert_eq!(failure_kind(&out), "json");

    let source = fs::read_dir(root.join("Kick")).unwrap().next().unwrap().unwrap().path();
    let input = source.to_str().unwrap();
    let out = ngs(&["--checkpoint", "ck", "--out", "r.wav", "resynth", "--input", input, "--class", "Kick"], cwd);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let n = read_wav(&source).unwrap().samples.len();
    let grains = (n.saturating_sub(256)).div_ceil(64) + 1;
    assert_eq!(read_wav(cwd.join("r.wav")).unwrap().samples.len(), (grains - 1) * 64 + 256);
    let out = ngs(
        &["--checkpoint", "ck", "--out", "r.wav", "resynth", "--input", input, "--class", "Kick", "--fade", "100"],
        cwd,
    );
    assert_eq!(failure_kind(&out), "config");

    fs::write(cwd.join("e.json"), json!([0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).to_string()).unwrap();
    let out = ngs(
        &["--checkpoint", "ck", "--out", "i.wav", "interp", "--alpha", "0.5", "--e1", "e.json", "--e2-seed", "4", "--class", "1"],
        cwd,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = ngs(
        &["--checkpoint", "ck", "--out", "i.wav", "interp", "--alpha", "0.5", "--e2-seed", "4", "--class", "1"],
        cwd,
    );
    assert_eq!(failure_kind(&out), "error");
}
