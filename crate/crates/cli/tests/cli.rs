use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lseq_cli::evaluate::evaluate_scorer;
use lseq_core::evaluation::SequenceScorer;
use lseq_core::formats::{read_feature_dir, Manifest};
use lseq_core::frontend::NUM_CLASSES;
use lseq_core::{Result as CoreResult, SequenceBatch};
use ndarray::Array2;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

const SMALL_MODEL: &str = r#"
[model]
seq_len = 20
fold_b = 4
fold_k = 5
filters = 4
attention = 8
hidden_epoch = 8
hidden_ss = 8
hidden_ws = 8
fc_units = 16

[train]
learning_rate = 1e-3
minibatch_size = 4
validate_every = 10
max_steps = 20
eval_batch_size = 16
"#;

fn lseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lseq")).args(args).env("RUST_LOG", "warn").output().expect("run lseq")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn checksums(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
        .iter()
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), hex::encode(Sha256::digest(std::fs::read(f).unwrap()))))
        .collect()
}

/// Three subjects with two short recordings each, prepared into features.
fn small_dataset(root: &Path) -> PathBuf {
    let data = root.join("data");
    ok(&lseq(&["synth", "--preset", "tiny", "--seed", "5", "--set", "n_subjects=3", "--set", "epochs_per_recording=80", "--out", p(&data)]));
    let features = root.join("features");
    ok(&lseq(&["prepare", "--manifest", p(&data.join("manifest.csv")), "--out", p(&features)]));
    features
}

fn write_config(root: &Path) -> PathBuf {
    let path = root.join("run.toml");
    std::fs::write(&path, SMALL_MODEL).unwrap();
    path
}

#[test]
fn synth_tiny_preset_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&lseq(&["synth", "--preset", "tiny", "--seed", "7", "--out", p(&a)]));
    ok(&lseq(&["synth", "--preset", "tiny", "--seed", "7", "--out", p(&b), "--workers", "3"]));
    assert_eq!(Manifest::read(&a.join("manifest.csv")).unwrap().rows.len(), 12);
    assert_eq!(checksums(&a), checksums(&b));
}

#[test]
fn synth_rejects_zero_cycle_period() {
    let tmp = TempDir::new().unwrap();
    let out = lseq(&["synth", "--set", "cycle_period=0", "--out", p(&tmp.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cycle"));
}

#[test]
fn prepare_reports_per_row_failures() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&lseq(&["synth", "--set", "n_subjects=1", "--set", "epochs_per_recording=40", "--out", p(&data)]));
    let features = tmp.path().join("features");
    ok(&lseq(&["prepare", "--manifest", p(&data.join("manifest.csv")), "--out", p(&features)]));
    assert_eq!(read_feature_dir(&features).unwrap().len(), 2);

    std::fs::remove_file(data.join("sub00_rec1.txt")).unwrap();
    let broken = tmp.path().join("broken");
    let out = lseq(&["prepare", "--manifest", p(&data.join("manifest.csv")), "--out", p(&broken)]);
    assert!(!out.status.success());
    assert_eq!(read_feature_dir(&broken).unwrap().len(), 1);
    let summary = std::fs::read_to_string(broken.join("summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("sub00_rec0,sub00,ok")));
    assert!(summary.lines().any(|l| l.starts_with("sub00_rec1,sub00,failed")));

    let empty = tmp.path().join("empty.csv");
    std::fs::write(&empty, "recording_id,signal_path,label_path,in_bed_start,in_bed_end,subject_id\n").unwrap();
    let out = lseq(&["prepare", "--manifest", p(&empty), "--out", p(&tmp.path().join("none"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no recordings"));
}

#[test]
fn train_evaluate_predict_and_resume() {
    let tmp = TempDir::new().unwrap();
    let features = small_dataset(tmp.path());
    let config = write_config(tmp.path());
    let root = tmp.path().join("runs");
    let out = Command::new(env!("CARGO_BIN_EXE_lseq"))
        .args(["train", "--config", p(&config), "--features", p(&features), "--seed", "1"])
        .env("LSEQ_RUN_ROOT", &root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(&out);
    let run = root.join("folded-L20-4x5-seed1");
    for f in ["config.toml", "metrics.csv", "best.ckpt", "last.ckpt", "report.txt", "report.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,train_loss,validation_accuracy,seconds_per_step");
    assert_eq!(metrics.lines().count(), 3);
    let snapshot = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snapshot.contains("patience = 50"));

    // resume continues the step counter
    ok(&lseq(&[
        "train", "--config", p(&config), "--features", p(&features), "--seed", "1", "--steps", "30",
        "--resume", p(&run.join("last.ckpt")), "--run-dir", p(&run),
    ]));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().last().unwrap().split(',').next().unwrap(), "30");

    let mut bad = std::fs::read(run.join("last.ckpt")).unwrap();
    bad[0] ^= 0xff;
    let corrupt = tmp.path().join("bad.ckpt");
    std::fs::write(&corrupt, bad).unwrap();
    let out = lseq(&["train", "--config", p(&config), "--features", p(&features), "--resume", p(&corrupt), "--run-dir", p(&tmp.path().join("r2"))]);
    assert!(!out.status.success());

    let eval = tmp.path().join("eval");
    ok(&lseq(&["evaluate", "--checkpoint", p(&run.join("best.ckpt")), "--features", p(&features), "--out", p(&eval)]));
    let rows = std::fs::read_to_string(eval.join("recordings.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 6);
    for f in ["report.json", "report.txt", "confusion.csv", "confusion.svg", "recordings.svg"] {
        assert!(eval.join(f).exists(), "{f} missing");
    }

    let pred = tmp.path().join("pred");
    ok(&lseq(&["predict", "--checkpoint", p(&run.join("best.ckpt")), "--features", p(&features), "--out", p(&pred)]));
    let text = std::fs::read_to_string(pred.join("sub00_rec0.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,predicted,reference,p_W,p_N1,p_N2,p_N3,p_REM");
    assert_eq!(text.lines().count(), 1 + 80);
}

#[test]
fn flat_shortcut_sets_baseline_shape() {
    let tmp = TempDir::new().unwrap();
    let features = small_dataset(tmp.path());
    let config = write_config(tmp.path());
    let run = tmp.path().join("flat");
    ok(&lseq(&[
        "train", "--config", p(&config), "--features", p(&features), "--variant", "flat", "--L", "20", "--steps", "10",
        "--run-dir", p(&run),
    ]));
    let snapshot: toml::Table = std::fs::read_to_string(run.join("config.toml")).unwrap().parse().unwrap();
    let model = snapshot["model"].as_table().unwrap();
    assert_eq!(model["variant"].as_str(), Some("flat"));
    assert_eq!(model["seq_len"].as_integer(), Some(20));
    assert_eq!(model["fold_b"].as_integer(), Some(1));
    assert_eq!(model["fold_k"].as_integer(), Some(20));
    let report = std::fs::read_to_string(run.join("report.txt")).unwrap();
    assert!(report.contains("sequential steps   20"));
}

#[test]
fn unknown_config_keys_fail() {
    let out = lseq(&["train", "--set", "train.learning_rat=1", "--run-dir", "/nonexistent/x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn loso_on_three_subjects_gives_three_folds() {
    let tmp = TempDir::new().unwrap();
    let features = small_dataset(tmp.path());
    let config = write_config(tmp.path());
    let out_dir = tmp.path().join("cv");
    ok(&lseq(&[
        "evaluate", "--config", p(&config), "--features", p(&features), "--protocol", "loso", "--set", "train.max_steps=10",
        "--out", p(&out_dir),
    ]));
    for i in 0..3 {
        assert!(out_dir.join(format!("fold_r0_f{i}.json")).exists());
    }
    assert!(!out_dir.join("fold_r0_f3.json").exists());
    let agg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("aggregate.json")).unwrap()).unwrap();
    assert!(agg["mean"]["accuracy"].as_f64().unwrap() >= 0.0);
    let rows = std::fs::read_to_string(out_dir.join("recordings.csv")).unwrap();
    // every test recording appears once
    assert_eq!(rows.lines().count(), 1 + 6);
}

#[test]
fn benchmark_smoke_and_duplicate_grid() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("bench");
    ok(&lseq(&["benchmark", "--miniature", "--grid", "flat:4,folded:2x4", "--steps", "10", "--minibatch", "2", "--out", p(&out_dir)]));
    let csv = std::fs::read_to_string(out_dir.join("scaling.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out_dir.join("scaling.svg").exists());
    let out = lseq(&["benchmark", "--miniature", "--grid", "flat:4,flat:4", "--steps", "1", "--out", p(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate"));
}

/// Returns the reference labels as one-hot posteriors.
struct Oracle {
    seq_len: usize,
}

impl SequenceScorer for Oracle {
    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn posteriors(&self, batch: &SequenceBatch) -> CoreResult<Vec<Array2<f64>>> {
        // labels in the batch are the reference stages of the window
        Ok((0..batch.sequences)
            .map(|s| {
                Array2::from_shape_fn((self.seq_len, NUM_CLASSES), |(l, c)| {
                    if batch.labels[s * self.seq_len + l] == c {
                        1.0
                    } else {
                        0.0
                    }
                })
            })
            .collect())
    }
}

#[test]
fn perfect_oracle_scores_one_everywhere() {
    let tmp = TempDir::new().unwrap();
    let features = small_dataset(tmp.path());
    let recordings = read_feature_dir(&features).unwrap();
    let oracle = Oracle { seq_len: 20 };
    let report = evaluate_scorer(&oracle, &recordings, 7, 4, 2, &tmp.path().join("eval")).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert_eq!(report.kappa, 1.0);
    assert_eq!(report.macro_f1, 1.0);
    assert_eq!(report.mean_sensitivity, 1.0);
    assert_eq!(report.mean_specificity, 1.0);
}
