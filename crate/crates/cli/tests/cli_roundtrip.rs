//! End-to-end CLI tests on a synthetic dataset: prepare, train, evaluate,
//! classify, replay, plot-history, and filter-response, including the
//! idempotency and exit-code contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ecgcrnn::testutil::{Mat4Values, mat4_bytes, spike_train, tone};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ecgcrnn"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn ecgcrnn");
    assert!(
        out.status.success(),
        "command {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Writes a small labeled dataset: spiky 300 Hz records of varying length.
fn write_dataset(dir: &Path, n_per_class: usize) -> usize {
    std::fs::create_dir_all(dir).unwrap();
    let mut reference = String::new();
    let classes = ['N', 'A', 'O', '~'];
    let mut count = 0;
    for (c, &token) in classes.iter().enumerate() {
        for i in 0..n_per_class {
            let id = format!("S{c}{i:03}");
            let len = 2700 + (c * n_per_class + i) * 350; // 9 s and up at 300 Hz
            let jitter = if c % 2 == 0 { 0 } else { 40 };
            let samples: Vec<i16> = spike_train(len, 140 + 20 * c, jitter, count as u64)
                .iter()
                .map(|v| (v * 800.0) as i16)
                .collect();
            let bytes = mat4_bytes("val", 1, samples.len() as u32, &Mat4Values::I16(samples));
            std::fs::write(dir.join(format!("{id}.mat")), bytes).unwrap();
            reference.push_str(&format!("{id},{token}\n"));
            count += 1;
        }
    }
    std::fs::write(dir.join("REFERENCE.csv"), reference).unwrap();
    count
}

struct Workspace {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    out: PathBuf,
}

fn prepared_workspace() -> Workspace {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    write_dataset(&data, 3);
    run_ok(&[
        "prepare",
        "--data-dir",
        data.to_str().unwrap(),
        "--train-size",
        "9",
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]);
    Workspace { _tmp: tmp, data, out }
}

#[test]
fn prepare_writes_split_cache_and_report() {
    let ws = prepared_workspace();

    let split = std::fs::read_to_string(ws.out.join("split.tsv")).unwrap();
    assert_eq!(split.lines().count(), 12);
    assert_eq!(split.matches("\ttrain").count(), 9);
    assert_eq!(split.matches("\ttest").count(), 3);

    let cache_files = std::fs::read_dir(ws.out.join("cache")).unwrap().count();
    assert_eq!(cache_files, 12);

    let report = std::fs::read_to_string(ws.out.join("report.txt")).unwrap();
    assert!(report.contains("Normal rhythm"));
    assert!(report.contains("Total"));

    let metadata: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.out.join("metadata.json")).unwrap())
            .unwrap();
    assert!(metadata["scale"].as_f64().unwrap() > 0.0);
    assert_eq!(metadata["class_counts"].as_array().unwrap().len(), 4);

    // Same seed, same bytes.
    let out2 = ws._tmp.path().join("out2");
    run_ok(&[
        "prepare",
        "--data-dir",
        ws.data.to_str().unwrap(),
        "--train-size",
        "9",
        "--seed",
        "7",
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(ws.out.join("split.tsv")).unwrap(),
        std::fs::read(out2.join("split.tsv")).unwrap()
    );
    assert_eq!(
        std::fs::read(ws.out.join("report.txt")).unwrap(),
        std::fs::read(out2.join("report.txt")).unwrap()
    );
}

#[test]
fn prepare_fails_cleanly_without_data() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = bin()
        .args(["prepare", "--data-dir", empty.to_str().unwrap()])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let missing = tmp.path().join("missing");
    let out = bin()
        .args(["prepare", "--data-dir", missing.to_str().unwrap()])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_evaluate_classify_replay_plot() {
    let ws = prepared_workspace();
    let config_path = ws._tmp.path().join("run.cfg");
    std::fs::write(
        &config_path,
        format!(
            "data_dir = {}\nout_dir = {}\nseed = 7\nepochs = 2\nbatch_size = 4\n\
             model_divisor = 16\ndropout = 0.1\nlr = 0.003\n",
            ws.data.display(),
            ws.out.display()
        ),
    )
    .unwrap();

    // Train.
    let out = run_ok(&["train", "--config", config_path.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("best epoch"), "{stdout}");
    let history = std::fs::read_to_string(ws.out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3); // header + 2 epochs
    assert!(ws.out.join("best.bin").is_file());

    // Evaluate (batch size 1 default); rerunning must be field-exact.
    let out = run_ok(&["evaluate", "--config", config_path.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Accuracy"), "{stdout}");
    let metrics_bytes = std::fs::read(ws.out.join("metrics.json")).unwrap();
    let metrics: serde_json::Value = serde_json::from_slice(&metrics_bytes).unwrap();
    assert!(metrics["accuracy"].as_f64().is_some());
    assert!(metrics["cinc_score"].as_f64().is_some());
    assert_eq!(metrics["confusion"].as_array().unwrap().len(), 4);
    run_ok(&["evaluate", "--config", config_path.to_str().unwrap()]);
    assert_eq!(metrics_bytes, std::fs::read(ws.out.join("metrics.json")).unwrap());

    // Classify a 9-second record: 1800 samples at 200 Hz -> 6 windows.
    let nine_s = ws.data.join("S0000.mat");
    let out = run_ok(&[
        "classify",
        "--config",
        config_path.to_str().unwrap(),
        "--input",
        nine_s.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("windows: 6"), "{stdout}");
    let csv = std::fs::read_to_string(ws.out.join("predictions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2); // header + one record
    assert!(csv.starts_with("record_id,class,"));

    // Replay a raw file twice: byte-identical NDJSON.
    let raw_path = ws._tmp.path().join("signal.raw");
    let mut bytes = b"fs=200\n".to_vec();
    for v in tone(7000, 200.0, 6.0, 420.0) {
        bytes.extend((v as i16).to_le_bytes());
    }
    std::fs::write(&raw_path, bytes).unwrap();
    run_ok(&[
        "replay",
        "--config",
        config_path.to_str().unwrap(),
        "--input",
        raw_path.to_str().unwrap(),
        "--frame-len",
        "500",
    ]);
    let first = std::fs::read(ws.out.join("replay.ndjson")).unwrap();
    assert!(!first.is_empty());
    assert!(first.starts_with(b"{\"type\":\"predict\""));
    run_ok(&[
        "replay",
        "--config",
        config_path.to_str().unwrap(),
        "--input",
        raw_path.to_str().unwrap(),
        "--frame-len",
        "500",
    ]);
    let second = std::fs::read(ws.out.join("replay.ndjson")).unwrap();
    assert_eq!(first, second);

    // ECGCRNN_CHECKPOINT overrides the configured checkpoint path.
    let ckpt = ws.out.join(
        std::fs::read_to_string(ws.out.join("best.bin")).unwrap().trim().to_string(),
    );
    let env_out = ws._tmp.path().join("env_out");
    let status = bin()
        .args([
            "replay",
            "--out",
            env_out.to_str().unwrap(),
            "--input",
            raw_path.to_str().unwrap(),
            "--frame-len",
            "500",
        ])
        .env("ECGCRNN_CHECKPOINT", &ckpt)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(first, std::fs::read(env_out.join("replay.ndjson")).unwrap());

    // Plot history.
    run_ok(&["plot-history", "--config", config_path.to_str().unwrap()]);
    let svg = std::fs::read_to_string(ws.out.join("history.svg")).unwrap();
    assert!(svg.len() > 200);
    assert!(svg.starts_with("<svg"));

    // Filter response dump.
    run_ok(&["filter-response", "--config", config_path.to_str().unwrap()]);
    let response = std::fs::read_to_string(ws.out.join("filter_response.csv")).unwrap();
    let mut lines = response.lines();
    assert_eq!(lines.next(), Some("freq_hz,magnitude"));
    let first_row = lines.next().unwrap();
    assert!(first_row.starts_with("0,0"), "DC row: {first_row}");
}

#[test]
fn evaluate_without_checkpoint_is_a_config_error() {
    let ws = prepared_workspace();
    let out = bin()
        .args([
            "evaluate",
            "--out",
            ws.out.to_str().unwrap(),
            "--config",
            "/nonexistent.cfg",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let cfg = ws._tmp.path().join("eval.cfg");
    std::fs::write(&cfg, format!("data_dir = {}\nout_dir = {}\n", ws.data.display(), ws.out.display()))
        .unwrap();
    let out = bin().args(["evaluate", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn help_lists_config_keys() {
    for (cmd, key) in [
        ("prepare", "train_size"),
        ("train", "model_divisor"),
        ("evaluate", "split_part"),
        ("classify", "input"),
        ("serve", "ECGCRNN_CHECKPOINT"),
        ("replay", "frame_len"),
        ("plot-history", "history"),
        ("filter-response", "points"),
    ] {
        let out = bin().args([cmd, "--help"]).output().unwrap();
        assert!(out.status.success());
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains(key), "`{cmd} --help` does not mention {key}\n{text}");
    }
}
