//! End-to-end checks of the `kws` binary: every subcommand, the documented
//! exit codes, and run-to-run reproducibility under a fixed seed.

use std::path::Path;
use std::process::{Command, Output};

fn kws(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kws"))
        .args(args)
        .output()
        .expect("spawn kws")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_config_toml(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        r#"
name = "tiny_cli"
feature_dim = 40
encoder_boundary = 2
biases = true

[context]
left = 1
right = 1
stride = 2

[[layers]]
kind = "svdf"
nodes = 8
memory = 4

[[layers]]
kind = "bottleneck"
size = 8

[[layers]]
kind = "svdf"
nodes = 8
memory = 8

[[layers]]
kind = "softmax"
classes = 2
"#,
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn count_reports_published_figures() {
    let out = kws(&["count", "--config", "E2E_700K"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("parameters: 737634"), "{text}");
    assert!(text.contains("macs_per_inference: 732224"), "{text}");
    assert!(text.contains("macs_per_10ms_frame: 366112"), "{text}");
    assert!(text.contains("121 inference steps (2420 ms)"), "{text}");
}

#[test]
fn count_rejects_unknown_config_with_usage_exit() {
    let out = kws(&["count", "--config", "NotAThing"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = kws(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let out = kws(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn features_csv_matches_hop_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("tone.wav");
    let pcm: Vec<f32> = (0..16 * 200)
        .map(|i| 0.3 * (std::f32::consts::TAU * 500.0 * i as f32 / 16000.0).sin())
        .collect();
    kws::wav::write_wav(&wav, &pcm, 16_000).unwrap();

    let out = kws(&["features", "--wav", wav.to_str().unwrap(), "--csv"]);
    assert!(out.status.success());
    let lines: Vec<&str> = stdout(&out).lines().collect();
    // 200 ms -> 18 frames; each line is timestamp + 40 energies.
    assert_eq!(lines.len(), 18);
    assert_eq!(lines[0].split(',').count(), 41);
    assert!(lines[1].starts_with("10,"));

    // Raw f32 output: 18 * 40 * 4 bytes.
    let out = kws(&["features", "--wav", wav.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(out.stdout.len(), 18 * 40 * 4);
}

#[test]
fn features_missing_wav_is_a_data_error() {
    let out = kws(&["features", "--wav", "/nonexistent/audio.wav"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");

    // synth: identical manifests for identical seeds.
    let out = kws(&[
        "synth",
        "--out",
        data_dir.to_str().unwrap(),
        "--seed",
        "5",
        "--pos",
        "6",
        "--neg",
        "6",
        "--negative-ms",
        "2000",
        "4000",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = data_dir.join("manifest.jsonl");
    assert!(manifest.exists());
    let first = std::fs::read(&manifest).unwrap();

    let data_dir2 = dir.path().join("data2");
    let out = kws(&[
        "synth",
        "--out",
        data_dir2.to_str().unwrap(),
        "--seed",
        "5",
        "--pos",
        "6",
        "--neg",
        "6",
        "--negative-ms",
        "2000",
        "4000",
    ]);
    assert!(out.status.success());
    assert_eq!(first, std::fs::read(data_dir2.join("manifest.jsonl")).unwrap());

    // train: same seed twice gives identical checksums.
    let config = tiny_config_toml(dir.path());
    let model_a = dir.path().join("a.kws");
    let model_b = dir.path().join("b.kws");
    let mut checksums = Vec::new();
    for model in [&model_a, &model_b] {
        let out = kws(&[
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--config",
            &config,
            "--out",
            model.to_str().unwrap(),
            "--recipe",
            "one_stage",
            "--seed",
            "7",
            "--epochs",
            "2",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
        checksums.push(report["param_checksum"].as_str().unwrap().to_string());
        assert!(report["final_loss"].as_f64().unwrap().is_finite());
    }
    assert_eq!(checksums[0], checksums[1], "same seed must reproduce the model");
    assert_eq!(std::fs::read(&model_a).unwrap(), std::fs::read(&model_b).unwrap());

    // stream: CSV scores to stdout, events to a file.
    let wav = data_dir.join("audio/pos00000.wav");
    let events_path = dir.path().join("events.jsonl");
    let out = kws(&[
        "stream",
        "--model",
        model_a.to_str().unwrap(),
        "--wav",
        wav.to_str().unwrap(),
        "--threshold",
        "0.9",
        "--events",
        events_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = stdout(&out);
    assert!(csv.starts_with("timestamp_ms,score"));
    assert!(csv.lines().count() > 10);
    assert!(events_path.exists());

    // eval: live scoring vs cached replay produce the same report.
    let cache = dir.path().join("scores.json");
    let report_live = dir.path().join("live.json");
    let out = kws(&[
        "eval",
        "--model",
        model_a.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--cache-out",
        cache.to_str().unwrap(),
        "--report",
        report_live.to_str().unwrap(),
        "--target-fa",
        "100",
        "--allow-short-negatives",
        "--jobs",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report_cached = dir.path().join("cached.json");
    let out = kws(&[
        "eval",
        "--cache-in",
        cache.to_str().unwrap(),
        "--report",
        report_cached.to_str().unwrap(),
        "--target-fa",
        "100",
        "--allow-short-negatives",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(&report_live).unwrap(),
        std::fs::read(&report_cached).unwrap(),
        "cached-score evaluation must equal live evaluation"
    );
}

#[test]
fn stream_with_missing_model_is_a_data_error() {
    let out = kws(&[
        "stream",
        "--model",
        "/nonexistent/model.kws",
        "--wav",
        "/nonexistent/audio.wav",
        "--threshold",
        "0.9",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_with_corrupt_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("bad.jsonl");
    std::fs::write(&manifest, "{not json\n").unwrap();
    let config = tiny_config_toml(dir.path());
    let out = kws(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        &config,
        "--out",
        dir.path().join("m.kws").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
