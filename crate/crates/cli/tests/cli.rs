//! End-to-end tests of the `occudet` binary: exit codes, file outputs and
//! reproducibility of each subcommand.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn occudet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occudet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/eco_raw")
}

fn write_tiny_config(path: &Path, epochs: usize, seed: u64) {
    std::fs::write(
        path,
        format!(
            "lstm_hidden = 4\ntrans_width = 4\nheads = 2\nhead_dim = 2\nffn_width = 8\n\
             epochs = {epochs}\nbatch_size = 4\nlearning_rate = 0.003\nseed = {seed}\n\
             patience = none\n"
        ),
    )
    .unwrap();
}

// ── preprocess ──────────────────────────────────────────────────────────

#[test]
fn preprocess_fixture_reports_known_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_file = dir.path().join("processed.csv");
    let out = occudet(&[
        "preprocess",
        "--raw",
        fixture_dir().to_str().unwrap(),
        "--out",
        out_file.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));

    let text = stdout(&out);
    assert!(text.contains("0.6250"), "household 01 ratio 15/24:\n{text}");
    assert!(text.contains("0.8333"), "household 02 ratio 20/24:\n{text}");
    assert!(text.contains("0.7292"), "overall ratio 35/48:\n{text}");
    assert!(text.contains("2 of 2 raw days kept"), "{text}");

    assert!(out_file.exists());
    assert!(dir.path().join("processed.csv.manifest").exists());

    let data = std::fs::read_to_string(&out_file).unwrap();
    let lines: Vec<&str> = data.lines().collect();
    assert_eq!(lines.len(), 1 + 2 * 24, "header plus 24 rows per day");
    // Household 01, hour 3: f1 = 0.5 * 3 despite the missing second.
    let row: Vec<&str> = lines[1 + 3].split(',').collect();
    assert_eq!(row[0], "01");
    assert_eq!(row[2], "3");
    assert_eq!(row[3].parse::<f64>().unwrap(), 1.5);
    assert_eq!(row[6], "1", "hour 3 is occupied");

    // Reprocessing produces byte-identical data.
    let again = dir.path().join("again.csv");
    let rerun = occudet(&[
        "preprocess",
        "--raw",
        fixture_dir().to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&rerun), 0);
    assert_eq!(
        std::fs::read(&out_file).unwrap(),
        std::fs::read(&again).unwrap()
    );
}

#[test]
fn preprocess_empty_directory_exits_two() {
    let empty = tempfile::tempdir().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = occudet(&[
        "preprocess",
        "--raw",
        empty.path().to_str().unwrap(),
        "--out",
        dir.path().join("x.csv").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(
        stderr(&out).contains("no raw day files found"),
        "{}",
        stderr(&out)
    );
}

// ── synth ───────────────────────────────────────────────────────────────

#[test]
fn synth_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out_file in [&a, &b] {
        let out = occudet(&[
            "synth",
            "--households",
            "2",
            "--days",
            "3",
            "--seed",
            "9",
            "--out",
            out_file.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    }
    let bytes_a = std::fs::read(&a).unwrap();
    assert_eq!(bytes_a, std::fs::read(&b).unwrap());

    let lines = bytes_a.iter().filter(|&&c| c == b'\n').count();
    assert_eq!(lines, 1 + 2 * 3 * 24, "header plus 24 rows per day sample");
}

// ── train ───────────────────────────────────────────────────────────────

fn make_synth(dir: &Path, households: &str, days: &str, seed: &str) -> PathBuf {
    let data = dir.join("data.csv");
    let out = occudet(&[
        "synth",
        "--households",
        households,
        "--days",
        days,
        "--seed",
        seed,
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    data
}

#[test]
fn train_writes_reproducible_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_synth(dir.path(), "1", "4", "21");
    let config = dir.path().join("run.cfg");
    write_tiny_config(&config, 3, 5);

    let ckpt_a = dir.path().join("a.ckpt");
    let ckpt_b = dir.path().join("b.ckpt");
    for ckpt in [&ckpt_a, &ckpt_b] {
        let out = occudet(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--variant",
            "hybrid_concat",
            "--config",
            config.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
        assert!(stdout(&out).contains("final training loss"));
    }
    assert_eq!(
        std::fs::read(&ckpt_a).unwrap(),
        std::fs::read(&ckpt_b).unwrap(),
        "same manifest, same checkpoint bytes"
    );
    assert!(dir.path().join("a.ckpt.trace.csv").exists());
    assert!(dir.path().join("a.ckpt.manifest").exists());
}

#[test]
fn train_rejects_unknown_variant_listing_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_synth(dir.path(), "1", "2", "22");
    let out = occudet(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--variant",
        "perceptron",
        "--out",
        dir.path().join("x.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    let err = stderr(&out);
    for name in [
        "hybrid_concat",
        "bilstm_then_transformer",
        "transformer_then_bilstm",
        "bilstm_attention",
    ] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn train_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_synth(dir.path(), "1", "2", "23");
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "epochs = 2\nlerning_rate = 0.1\n").unwrap();
    let out = occudet(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--variant",
        "hybrid_concat",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("x.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(
        stderr(&out).contains("unknown config key `lerning_rate`"),
        "{}",
        stderr(&out)
    );
}

// ── crossval ────────────────────────────────────────────────────────────

#[test]
fn crossval_writes_summary_and_long_format() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_synth(dir.path(), "1", "6", "24");
    let config = dir.path().join("run.cfg");
    write_tiny_config(&config, 2, 6);
    let report_dir = dir.path().join("report");
    let out = occudet(&[
        "crossval",
        "--data",
        data.to_str().unwrap(),
        "--variants",
        "hybrid_concat",
        "--k",
        "2",
        "--seed",
        "3",
        "--config",
        config.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));

    let summary = std::fs::read_to_string(report_dir.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "model,accuracy,precision,recall,f1,roc_auc");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("hybrid_concat,"));

    let long = std::fs::read_to_string(report_dir.join("per_fold.csv")).unwrap();
    let accuracy_rows = long.lines().filter(|l| l.contains(",accuracy,")).count();
    assert_eq!(accuracy_rows, 2, "one accuracy row per fold");
    assert!(report_dir.join("summary.txt").exists());
    assert!(report_dir.join("manifest.txt").exists());

    let manifest = std::fs::read_to_string(report_dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("subcommand = crossval"));
    assert!(manifest.contains("seed = 3"));
}

#[test]
fn crossval_rejects_more_folds_than_samples() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_synth(dir.path(), "1", "4", "25");
    let out = occudet(&[
        "crossval",
        "--data",
        data.to_str().unwrap(),
        "--variants",
        "hybrid_concat",
        "--k",
        "10",
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("cannot split"), "{}", stderr(&out));
}

#[test]
fn crossval_manual_features_labels_the_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_synth(dir.path(), "1", "4", "26");
    let config = dir.path().join("run.cfg");
    write_tiny_config(&config, 2, 7);
    let report_dir = dir.path().join("report");
    let out = occudet(&[
        "crossval",
        "--data",
        data.to_str().unwrap(),
        "--variants",
        "bilstm_attention",
        "--k",
        "2",
        "--manual-features",
        "--config",
        config.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let summary = std::fs::read_to_string(report_dir.join("summary.csv")).unwrap();
    assert!(
        summary.contains("bilstm_attention+features,"),
        "{summary}"
    );
}

// ── gradcheck ───────────────────────────────────────────────────────────

#[test]
fn gradcheck_passes_and_prints_components() {
    let out = occudet(&["gradcheck", "--seed", "1"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    for component in ["op.matmul", "layer.bilstm", "model.hybrid_concat"] {
        assert!(text.contains(component), "{text}");
    }
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn gradcheck_corrupted_component_exits_one_with_its_name() {
    let out = occudet(&["gradcheck", "--seed", "1", "--corrupt", "op.sigmoid"]);
    assert_eq!(exit_code(&out), 1);
    assert!(
        stderr(&out).contains("op.sigmoid"),
        "failure names the op: {}",
        stderr(&out)
    );
}

#[test]
fn gradcheck_unknown_corruption_target_exits_two() {
    let out = occudet(&["gradcheck", "--corrupt", "op.نope"]);
    assert_eq!(exit_code(&out), 2);
}
