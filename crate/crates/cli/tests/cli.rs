//! Contract tests for the `ealign` binary: flag handling, config layering,
//! file formats, and the promised failure modes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ealign::aligning::ShiftVector;
use ealign::data::{write_csv_dataset, write_logit_file, GaussianMixture, Split};
use ealign::numerics::LogitMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ealign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ealign"))
        .args(args)
        .output()
        .expect("spawning ealign")
}

fn run_ok(args: &[&str]) -> Output {
    let out = ealign(args);
    assert!(
        out.status.success(),
        "ealign {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Runs expecting failure; returns stderr.
fn run_err(args: &[&str]) -> String {
    let out = ealign(args);
    assert!(!out.status.success(), "ealign {args:?} unexpectedly passed");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_sample_logits(dir: &Path, with_labels: bool) -> (PathBuf, PathBuf, PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let flat: Vec<f64> = (0..60 * 4).map(|_| rng.random_range(-5.0..=5.0)).collect();
    let logits = LogitMatrix::from_flat(flat, 60, 4).unwrap();
    let labels: Vec<usize> = (0..60).map(|i| i % 4).collect();
    let logit_path = dir.join("sample.ealg");
    write_logit_file(
        &logit_path,
        &logits,
        if with_labels { Some(&labels) } else { None },
    )
    .unwrap();
    let counts_path = dir.join("counts.txt");
    std::fs::write(&counts_path, "200\n80\n12\n3\n").unwrap();
    let labels_path = dir.join("labels.txt");
    let text: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
    std::fs::write(&labels_path, text.join("\n")).unwrap();
    (logit_path, counts_path, labels_path)
}

#[test]
fn align_uniform_counts_single_cluster_gives_zero_shifts() {
    let dir = tempfile::tempdir().unwrap();
    let (logits, _, _) = write_sample_logits(dir.path(), false);
    let counts = dir.path().join("uniform.txt");
    std::fs::write(&counts, "50\n50\n50\n50\n").unwrap();
    let out = dir.path().join("shifts.json");
    run_ok(&[
        "align",
        "--logits",
        logits.to_str().unwrap(),
        "--counts",
        counts.to_str().unwrap(),
        "--clusters",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    let shifts = ShiftVector::load(&out).unwrap();
    assert_eq!(shifts.alphas, vec![0.0; 4]);
}

#[test]
fn eval_zero_shifts_match_no_shifts() {
    let dir = tempfile::tempdir().unwrap();
    let (logits, _, labels) = write_sample_logits(dir.path(), false);
    let zero = dir.path().join("zero.json");
    ShiftVector::zero(4).save(&zero).unwrap();
    let plain = dir.path().join("plain.json");
    let shifted = dir.path().join("shifted.json");
    run_ok(&[
        "eval",
        "--logits",
        logits.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "--out",
        plain.to_str().unwrap(),
    ]);
    run_ok(&[
        "eval",
        "--logits",
        logits.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "--shifts",
        zero.to_str().unwrap(),
        "--out",
        shifted.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(&plain).unwrap(),
        std::fs::read(&shifted).unwrap()
    );
}

#[test]
fn stock_long_tail_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["train-lt", "--out", a.to_str().unwrap()]);
    run_ok(&["train-lt", "--out", b.to_str().unwrap()]);
    assert_eq!(
        std::fs::read(a.join("metrics.json")).unwrap(),
        std::fs::read(b.join("metrics.json")).unwrap()
    );
}

#[test]
fn config_file_and_set_flags_layer_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"epochs": 4, "train_per_class": 30, "test_per_class": 6, "classes": 4, "feature_dim": 4, "imbalance_ratio": 6.0}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    run_ok(&[
        "train-lt",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "11",
        "--set",
        "epochs=2",
    ]);
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["epochs"], 2, "--set must beat the file value");
    assert_eq!(echoed["seed"], 11, "--seed must beat the default");
    assert_eq!(echoed["train_per_class"], 30);
    assert_eq!(echoed["mode"], "train-lt");
    // the echo must replay to the same result
    let replay = dir.path().join("replay");
    run_ok(&[
        "train-lt",
        "--config",
        out.join("config.json").to_str().unwrap(),
        "--out",
        replay.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(out.join("metrics.json")).unwrap(),
        std::fs::read(replay.join("metrics.json")).unwrap()
    );
}

#[test]
fn csv_datasets_feed_the_training_modes() {
    let dir = tempfile::tempdir().unwrap();
    let mix = GaussianMixture::new(4, 3, 3.0, 1.0, 13).unwrap();
    let train = mix.sample(25, 1, Split::Train).unwrap();
    let test = mix.sample(8, 2, Split::Test).unwrap();
    let train_csv = dir.path().join("train.csv");
    let test_csv = dir.path().join("test.csv");
    write_csv_dataset(&train_csv, &train).unwrap();
    write_csv_dataset(&test_csv, &test).unwrap();
    let out = dir.path().join("run");
    run_ok(&[
        "train-cil",
        "--out",
        out.to_str().unwrap(),
        "--set",
        &format!("train_csv=\"{}\"", train_csv.display()),
        "--set",
        &format!("test_csv=\"{}\"", test_csv.display()),
        "--set",
        "steps=2",
        "--set",
        "epochs=3",
        "--set",
        "rehearsal_capacity=12",
    ]);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["steps"].as_array().unwrap().len(), 2);
}

#[test]
fn unknown_config_key_is_refused() {
    let err = run_err(&["train-lt", "--out", "/tmp/never", "--set", "epocs=3"]);
    assert!(err.contains("unknown field"), "stderr: {err}");
}

#[test]
fn wrong_mode_in_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"mode": "train-lt"}"#).unwrap();
    let err = run_err(&[
        "train-cil",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert!(err.contains("mode"), "stderr: {err}");
}

#[test]
fn malformed_set_flag_is_refused() {
    let err = run_err(&["train-lt", "--out", "/tmp/never", "--set", "epochs"]);
    assert!(err.contains("KEY=VALUE"), "stderr: {err}");
}

#[test]
fn missing_logit_file_is_a_clean_error() {
    let err = run_err(&[
        "diagnose",
        "--logits",
        "/tmp/does-not-exist.ealg",
        "--counts",
        "/tmp/also-missing.txt",
        "--out",
        "/tmp/never.csv",
    ]);
    assert!(err.starts_with("error:"), "stderr: {err}");
}

#[test]
fn count_length_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (logits, _, _) = write_sample_logits(dir.path(), false);
    let counts = dir.path().join("short.txt");
    std::fs::write(&counts, "10\n5\n").unwrap();
    let err = run_err(&[
        "align",
        "--logits",
        logits.to_str().unwrap(),
        "--counts",
        counts.to_str().unwrap(),
        "--clusters",
        "2",
        "--out",
        dir.path().join("s.json").to_str().unwrap(),
    ]);
    assert!(err.contains("2 classes") && err.contains("4"), "stderr: {err}");
}

#[test]
fn auto_clusters_needs_embedded_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (logits, counts, _) = write_sample_logits(dir.path(), false);
    let err = run_err(&[
        "align",
        "--logits",
        logits.to_str().unwrap(),
        "--counts",
        counts.to_str().unwrap(),
        "--clusters",
        "auto",
        "--out",
        dir.path().join("s.json").to_str().unwrap(),
    ]);
    assert!(err.contains("labels"), "stderr: {err}");
}

#[test]
fn anchor_index_overrides_the_default() {
    let dir = tempfile::tempdir().unwrap();
    let (logits, counts, _) = write_sample_logits(dir.path(), true);
    let few = dir.path().join("few.json");
    let head = dir.path().join("head.json");
    for (anchor, out) in [("few", &few), ("0", &head)] {
        run_ok(&[
            "align",
            "--logits",
            logits.to_str().unwrap(),
            "--counts",
            counts.to_str().unwrap(),
            "--clusters",
            "2",
            "--anchor",
            anchor,
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    let few = ShiftVector::load(&few).unwrap();
    let head = ShiftVector::load(&head).unwrap();
    assert_ne!(few.anchor, head.anchor);
    assert_eq!(head.anchor, 0);

    let err = run_err(&[
        "align",
        "--logits",
        logits.to_str().unwrap(),
        "--counts",
        counts.to_str().unwrap(),
        "--clusters",
        "2",
        "--anchor",
        "9",
        "--out",
        dir.path().join("bad.json").to_str().unwrap(),
    ]);
    assert!(err.starts_with("error:"), "stderr: {err}");
}

#[test]
fn label_length_mismatch_in_eval_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (logits, _, _) = write_sample_logits(dir.path(), false);
    let labels = dir.path().join("short.txt");
    std::fs::write(&labels, "0\n1\n").unwrap();
    let err = run_err(&[
        "eval",
        "--logits",
        logits.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "--out",
        dir.path().join("m.json").to_str().unwrap(),
    ]);
    assert!(err.contains("2 samples") && err.contains("60"), "stderr: {err}");
}

#[test]
fn diagnose_writes_the_energy_table() {
    let dir = tempfile::tempdir().unwrap();
    let (logits, counts, _) = write_sample_logits(dir.path(), false);
    let out = dir.path().join("energy.csv");
    let output = run_ok(&[
        "diagnose",
        "--logits",
        logits.to_str().unwrap(),
        "--counts",
        counts.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "class,count,neg_free_energy");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,200,"));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("spearman"), "stdout: {stdout}");
}
