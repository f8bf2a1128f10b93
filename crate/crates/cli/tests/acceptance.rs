//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails. Select criteria with `LSEQ_ACCEPTANCE=1,4,6`.
//!
//! The long-running criteria (3, 7, 9) use desk-scale widths; see README.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use lseq_core::evaluation::{compute_metrics, evaluate_recordings, TrainedModel};
use lseq_core::formats::{prepare_recording, FeatureRecording, PrepareOptions};
use lseq_core::frontend::{Stage, NUM_CLASSES};
use lseq_core::long_context::{fold, unfold, FoldLayout, FoldSpec};
use lseq_core::model::{gradient_check, loss, Model, ModelConfig, PredictionSequence, Variant};
use lseq_core::nn::Mode;
use lseq_core::params::{ParamKind, ParamStore};
use lseq_core::scaling::{measure_seq_steps, random_batch};
use lseq_core::synth::{write_dataset, SynthConfig};
use lseq_core::tape::softmax_rows;
use lseq_core::train::{init_from_pretrained, step_rng, train, train_step, InitMode, TrainConfig, TrainOutcome};
use lseq_core::optim::Adam;
use lseq_core::ConfusionMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<(bool, String), String>;

fn main() {
    let selected: Option<BTreeSet<usize>> =
        std::env::var("LSEQ_ACCEPTANCE").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "fold/unfold bijection", fold_bijection),
        (2, "sequential-step accounting", step_accounting),
        (3, "sub-linear wall-clock scaling", wall_clock_scaling),
        (4, "gradient correctness", gradients),
        (5, "metric oracle equivalence", metric_oracle),
        (6, "normalization invariants", normalization),
        (7, "long-context learnability", learnability),
        (8, "pipeline reproducibility", reproducibility),
        (9, "transfer mechanism", transfer),
        (10, "clinical reference numbers (documentation only)", documentation),
    ];
    // Timing and training outcomes on one core are reported but do not fail the target.
    let statistical = [3, 7, 9];
    let (mut failed, mut reported) = (0, 0);
    for (n, name, run) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&n)) {
            continue;
        }
        let started = Instant::now();
        let (pass, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        let secs = started.elapsed().as_secs_f64();
        println!("{} {n:>2} {name}: {detail} [{secs:.1} s]", if pass { "PASS" } else { "FAIL" });
        if !pass && statistical.contains(&n) {
            reported += 1;
        } else if !pass {
            failed += 1;
        }
    }
    if reported > 0 {
        println!("{reported} statistical criterion(s) failed; reported only");
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// 1 -------------------------------------------------------------------------

/// Checks fold, unfold and the batched layout permutations of one shape
/// against the position formula `ell = b*K + k` (0-based).
fn fold_mismatches(b: usize, k: usize, sequences: usize) -> Result<usize, String> {
    let l = b * k;
    let spec = FoldSpec::new(l, b, k).map_err(e)?;
    let mut bad = 0;
    let seq = Array2::from_shape_fn((l, 2), |(i, j)| (i * 2 + j) as f64);
    let grid = fold(&seq, spec).map_err(e)?;
    for bi in 0..b {
        for ki in 0..k {
            let ell = bi * k + ki;
            bad += usize::from(grid.values[[bi, ki, 0]] != seq[[ell, 0]] || grid.values[[bi, ki, 1]] != seq[[ell, 1]]);
            bad += usize::from(spec.fold_index(ell + 1) != (bi + 1, ki + 1) || spec.unfold_index(bi + 1, ki + 1) != ell + 1);
        }
    }
    bad += usize::from(unfold(&grid).map_err(e)? != seq);

    let layout = FoldLayout::new(spec, sequences);
    let n = l * sequences;
    for perm in [&layout.to_intra, &layout.intra_to_inter, &layout.inter_to_samples, &layout.intra_to_samples] {
        let mut seen = vec![false; n];
        for &p in perm.iter() {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                bad += 1;
            }
        }
        bad += usize::from(perm.len() != n);
    }
    if bad > 0 {
        return Ok(bad);
    }
    // intra rows are time-major over k with batch (s, b); inter rows are
    // time-major over b with batch (s, k)
    let intra: Vec<usize> = layout.to_intra.to_vec();
    let inter: Vec<usize> = layout.intra_to_inter.iter().map(|&r| intra[r]).collect();
    let back: Vec<usize> = layout.inter_to_samples.iter().map(|&r| inter[r]).collect();
    let direct: Vec<usize> = layout.intra_to_samples.iter().map(|&r| intra[r]).collect();
    for s in 0..sequences {
        for bi in 0..b {
            for ki in 0..k {
                let sample_row = s * l + bi * k + ki;
                bad += usize::from(intra[ki * sequences * b + s * b + bi] != sample_row);
                bad += usize::from(inter[bi * sequences * k + s * k + ki] != sample_row);
            }
        }
    }
    bad += back.iter().enumerate().filter(|&(i, &r)| i != r).count();
    bad += direct.iter().enumerate().filter(|&(i, &r)| i != r).count();
    Ok(bad)
}

fn fold_bijection() -> Outcome {
    let mut shapes = 0;
    let mut bad = 0;
    for b in 1..=24 {
        for k in 1..=24 / b {
            for sequences in [1, 3] {
                bad += fold_mismatches(b, k, sequences)?;
                shapes += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (b, k) in [(10, 20), (20, 10)] {
        for _ in 0..5 {
            bad += fold_mismatches(b, k, rng.gen_range(1..=8))?;
            shapes += 1;
        }
    }
    Ok((bad == 0, format!("{shapes} layouts, {bad} mismatches")))
}

// 2 -------------------------------------------------------------------------

fn counter_config(variant: Variant, b: usize, k: usize) -> ModelConfig {
    ModelConfig {
        variant,
        seq_len: b * k,
        fold_b: b,
        fold_k: k,
        frames: 2,
        bins: 5,
        filters: 2,
        attention: 2,
        hidden_epoch: 2,
        hidden_ss: 2,
        hidden_ws: 2,
        fc_units: 2,
        ..ModelConfig::default()
    }
}

fn step_accounting() -> Outcome {
    let grid = [
        (Variant::Flat, 1, 20, 20),
        (Variant::Flat, 1, 100, 100),
        (Variant::Flat, 1, 200, 200),
        (Variant::Folded, 10, 20, 30),
        (Variant::Folded, 20, 10, 30),
        (Variant::Folded, 20, 20, 40),
        (Variant::Folded, 10, 10, 20),
    ];
    let mut wrong = Vec::new();
    for (variant, b, k, expected) in grid {
        let got = measure_seq_steps(&counter_config(variant, b, k)).map_err(e)?;
        if got != expected {
            wrong.push(format!("{variant:?} {b}x{k}: {got} != {expected}"));
        }
    }
    Ok((wrong.is_empty(), if wrong.is_empty() { format!("{} configurations exact", grid.len()) } else { wrong.join("; ") }))
}

// 3 -------------------------------------------------------------------------

fn time_steps(config: &ModelConfig, steps: u64) -> Result<f64, String> {
    let (model, mut store) = Model::build(config, 0).map_err(e)?;
    let batch = random_batch(config, 8, 1).map_err(e)?;
    let mut adam = Adam::new(TrainConfig::default().adam(), &store);
    let started = Instant::now();
    for s in 0..steps {
        train_step(&model, &mut store, &mut adam, &batch, step_rng(0, s)).map_err(e)?.ok_or("non-finite loss")?;
    }
    Ok(started.elapsed().as_secs_f64())
}

fn wall_clock_scaling() -> Outcome {
    let mini = ModelConfig::miniature();
    let flat = |l| ModelConfig { variant: Variant::Flat, seq_len: l, fold_b: 1, fold_k: l, ..mini.clone() };
    let folded = ModelConfig { variant: Variant::Folded, seq_len: 200, fold_b: 20, fold_k: 10, ..mini.clone() };
    let t20 = time_steps(&flat(20), 100)?;
    let t200 = time_steps(&flat(200), 100)?;
    let tf = time_steps(&folded, 100)?;
    let (flat_ratio, folded_ratio) = (t200 / t20, tf / t20);
    Ok((
        folded_ratio < flat_ratio && flat_ratio >= 2.5,
        format!("flat20 {t20:.2} s, flat200 {t200:.2} s (x{flat_ratio:.2}), folded200 20x10 {tf:.2} s (x{folded_ratio:.2})"),
    ))
}

// 4 -------------------------------------------------------------------------

fn gradients() -> Outcome {
    let cfg = ModelConfig::miniature();
    let (model, mut store) = Model::build(&cfg, 21).map_err(e)?;
    // batch-norm statistics and the attention bias away from their identity values
    let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).kind == ParamKind::Buffer).collect();
    for (i, id) in ids.into_iter().enumerate() {
        let is_var = store.entry(id).name.contains("var");
        store.get_mut(id).mapv_inplace(|v| if is_var { v * (1.0 + 0.1 * (i % 3) as f64) } else { v + 0.05 * (i % 4) as f64 });
    }
    let id = store.id("encoder.attention.b").ok_or("no attention bias")?;
    store.get_mut(id).indexed_iter_mut().for_each(|((_, c), v)| *v = 0.3 * c as f64 - 0.8);
    let batch = random_batch(&cfg, 2, 22).map_err(e)?;
    let checks = gradient_check(&model, &store, &batch, 1e-6).map_err(e)?;
    let worst = checks.iter().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error)).ok_or("no parameters")?;
    Ok((
        worst.relative_error < 1e-4,
        format!("{} tensors, max relative error {:.2e} ({})", checks.len(), worst.relative_error, worst.name),
    ))
}

// 5 -------------------------------------------------------------------------

/// Metrics recomputed from the expanded list of (reference, predicted) pairs.
fn oracle(counts: &[[u64; NUM_CLASSES]; NUM_CLASSES]) -> (f64, f64, f64, f64, f64, Vec<f64>) {
    let mut pairs = Vec::new();
    for (r, row) in counts.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            pairs.extend(std::iter::repeat((r, p)).take(n as usize));
        }
    }
    let n = pairs.len() as f64;
    let agree = pairs.iter().filter(|(r, p)| r == p).count() as f64;
    let frac = |x: f64, y: f64| if y == 0.0 { 0.0 } else { x / y };
    let mut chance = 0.0;
    let (mut f1s, mut sens, mut spec) = (Vec::new(), 0.0, 0.0);
    for c in 0..NUM_CLASSES {
        let tp = pairs.iter().filter(|&&(r, p)| r == c && p == c).count() as f64;
        let fp = pairs.iter().filter(|&&(r, p)| r != c && p == c).count() as f64;
        let fn_ = pairs.iter().filter(|&&(r, p)| r == c && p != c).count() as f64;
        let tn = pairs.iter().filter(|&&(r, p)| r != c && p != c).count() as f64;
        chance += ((tp + fn_) / n) * ((tp + fp) / n);
        let precision = frac(tp, tp + fp);
        let recall = frac(tp, tp + fn_);
        f1s.push(frac(2.0 * precision * recall, precision + recall));
        sens += recall;
        spec += frac(tn, tn + fp);
    }
    let acc = agree / n;
    let kappa = frac(acc - chance, 1.0 - chance);
    let k = NUM_CLASSES as f64;
    (acc, kappa, f1s.iter().sum::<f64>() / k, sens / k, spec / k, f1s)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let mut counts = [[0u64; NUM_CLASSES]; NUM_CLASSES];
        for row in counts.iter_mut() {
            for v in row.iter_mut() {
                // some sparse matrices so empty rows and columns occur
                *v = if i % 4 == 0 && rng.gen_bool(0.4) { 0 } else { rng.gen_range(0..200) };
            }
        }
        if counts.iter().flatten().sum::<u64>() == 0 {
            counts[0][0] = 1;
        }
        let m = compute_metrics(&ConfusionMatrix::from_counts(counts)).map_err(e)?;
        let (acc, kappa, mf1, sens, spec, f1s) = oracle(&counts);
        let mut diffs = vec![m.accuracy - acc, m.kappa - kappa, m.macro_f1 - mf1, m.mean_sensitivity - sens, m.mean_specificity - spec];
        diffs.extend(m.per_class_f1.iter().zip(&f1s).map(|(a, b)| a - b));
        worst = diffs.iter().fold(worst, |w, d| w.max(d.abs()));
    }
    let mut perfect = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    let mut constant = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        perfect[c][c] = 10 + 7 * c as u64;
        constant[c][2] = 3 + 11 * c as u64;
    }
    let k1 = compute_metrics(&ConfusionMatrix::from_counts(perfect)).map_err(e)?.kappa;
    let k0 = compute_metrics(&ConfusionMatrix::from_counts(constant)).map_err(e)?.kappa;
    Ok((
        worst <= 1e-12 && k1 == 1.0 && k0 == 0.0,
        format!("100 matrices, max deviation {worst:.1e}; perfect kappa {k1}, constant-prediction kappa {k0}"),
    ))
}

// 6 -------------------------------------------------------------------------

fn normalization() -> Outcome {
    let mut worst_attention: f64 = 0.0;
    let mut worst_posterior: f64 = 0.0;
    let configs = [
        ModelConfig::miniature(),
        ModelConfig { variant: Variant::Flat, seq_len: 6, fold_b: 1, fold_k: 6, ..ModelConfig::miniature() },
        ModelConfig { seq_len: 12, fold_b: 3, fold_k: 4, frames: 29, bins: 129, filters: 8, ..ModelConfig::miniature() },
    ];
    for (i, cfg) in configs.iter().enumerate() {
        let (model, store) = Model::build(cfg, i as u64).map_err(e)?;
        let batch = random_batch(cfg, 3, 10 + i as u64).map_err(e)?;
        for mode in [Mode::Eval, Mode::Train] {
            let rng = (mode == Mode::Train).then(|| step_rng(0, i as u64));
            let fwd = model.forward(&store, &batch, mode, rng).map_err(e)?;
            for col in fwd.ctx.tape.value(fwd.attention).columns() {
                worst_attention = worst_attention.max((col.sum() - 1.0).abs());
            }
            for row in softmax_rows(fwd.ctx.tape.value(fwd.logits)).rows() {
                worst_posterior = worst_posterior.max((row.sum() - 1.0).abs());
            }
        }
    }
    let uniform = PredictionSequence { probabilities: Array2::from_elem((7, NUM_CLASSES), 0.2) };
    let direct = loss(&[uniform], &[vec![0, 1, 2, 3, 4, 0, 3]], &[vec![true; 7]], 0.0, 0.0).map_err(e)?;

    // a model whose output layer is zero emits uniform logits
    let cfg = ModelConfig { l2: 0.0, ..ModelConfig::miniature() };
    let (model, mut store) = Model::build(&cfg, 4).map_err(e)?;
    for name in ["head.out.weight", "head.out.bias"] {
        let id = store.id(name).ok_or("missing output layer")?;
        store.get_mut(id).fill(0.0);
    }
    let through_model = model.loss_value(&store, &random_batch(&cfg, 2, 9).map_err(e)?, Mode::Eval).map_err(e)?;
    let ln5 = 5f64.ln();
    let anchor = (direct - ln5).abs().max((through_model - ln5).abs());
    Ok((
        worst_attention < 1e-6 && worst_posterior < 1e-6 && anchor < 1e-6,
        format!("attention {worst_attention:.1e}, posteriors {worst_posterior:.1e}, ln 5 anchor {anchor:.1e}"),
    ))
}

// shared data helpers -------------------------------------------------------

fn synth_features(cfg: &SynthConfig, dir: &Path) -> Result<Vec<FeatureRecording>, String> {
    let manifest = write_dataset(cfg, dir, 1).map_err(e)?;
    manifest.rows.iter().map(|row| prepare_recording(&manifest, row, &PrepareOptions::default()).map_err(e)).collect()
}

/// Splits recordings by subject index: `[0, train)`, `[train, train+val)`, rest.
fn by_subject(recs: Vec<FeatureRecording>, train: usize, val: usize) -> (Vec<FeatureRecording>, Vec<FeatureRecording>, Vec<FeatureRecording>) {
    let (mut a, mut b, mut c) = (Vec::new(), Vec::new(), Vec::new());
    for r in recs {
        let s: usize = r.subject_id.trim_start_matches("sub").parse().expect("synthetic subject id");
        if s < train {
            a.push(r)
        } else if s < train + val {
            b.push(r)
        } else {
            c.push(r)
        }
    }
    (a, b, c)
}

fn desk_model(variant: Variant, b: usize, k: usize) -> ModelConfig {
    ModelConfig {
        variant,
        seq_len: b * k,
        fold_b: b,
        fold_k: k,
        filters: 8,
        attention: 16,
        hidden_epoch: 16,
        hidden_ss: 16,
        hidden_ws: 16,
        fc_units: 32,
        ..ModelConfig::default()
    }
}

fn fit(
    cfg: &ModelConfig,
    store: Option<ParamStore>,
    train_set: &[FeatureRecording],
    val_set: &[FeatureRecording],
    tc: &TrainConfig,
) -> Result<(Model, TrainOutcome), String> {
    let (model, fresh) = Model::build(cfg, tc.seed).map_err(e)?;
    let outcome = train(&model, store.unwrap_or(fresh), None, train_set, val_set, tc, |_, _, _| Ok(())).map_err(e)?;
    Ok((model, outcome))
}

// 7 -------------------------------------------------------------------------

/// Overall and N1/REM accuracy on the test recordings.
fn test_accuracy(model: &Model, params: &ParamStore, test: &[FeatureRecording]) -> Result<(f64, f64), String> {
    let scorer = TrainedModel { model, params };
    let (_, cm) = evaluate_recordings(&scorer, test, model.config.seq_len, 8, 1).map_err(e)?;
    let (n1, rem) = (Stage::N1.index(), Stage::Rem.index());
    let pair_total: u64 = cm.counts[n1].iter().chain(&cm.counts[rem]).sum();
    Ok((cm.accuracy(), (cm.counts[n1][n1] + cm.counts[rem][rem]) as f64 / pair_total as f64))
}

fn learnability() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e)?;
    let recs = synth_features(&SynthConfig::small(0), tmp.path())?;
    let (train_set, val_set, test_set) = by_subject(recs, 14, 2);
    let mut passes = 0;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let tc = |steps| TrainConfig { learning_rate: 1e-3, max_steps: steps, validate_every: 100, early_stopping: false, seed, ..TrainConfig::default() };
        let flat_cfg = desk_model(Variant::Flat, 1, 20);
        let (flat, flat_out) = fit(&flat_cfg, None, &train_set, &val_set, &tc(1500))?;
        let (flat_acc, flat_pair) = test_accuracy(&flat, &flat_out.best, &test_set)?;
        let folded_cfg = desk_model(Variant::Folded, 20, 10);
        let (folded, folded_out) = fit(&folded_cfg, None, &train_set, &val_set, &tc(600))?;
        let (acc, pair) = test_accuracy(&folded, &folded_out.best, &test_set)?;
        let pass = acc >= flat_acc + 0.05 && pair >= 0.80 && flat_pair <= 0.60;
        passes += usize::from(pass);
        lines.push(format!("seed {seed}: folded {acc:.3}/{pair:.3} vs flat {flat_acc:.3}/{flat_pair:.3}"));
    }
    Ok((passes >= 2, format!("{passes}/3 seeds pass (overall/pair accuracy); {}", lines.join("; "))))
}

// 8 -------------------------------------------------------------------------

const REPRO_CONFIG: &str = r#"
[model]
seq_len = 40
fold_b = 4
fold_k = 10
filters = 4
attention = 8
hidden_epoch = 8
hidden_ss = 8
hidden_ws = 8
fc_units = 16

[train]
learning_rate = 1e-3
validate_every = 50
max_steps = 200
workers = 1
seed = 3
"#;

fn lseq(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lseq")).args(args).env("RUST_LOG", "warn").output().map_err(e)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("lseq {}: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn pipeline_run(root: &Path) -> Result<PathBuf, String> {
    let p = |x: &Path| x.to_str().expect("utf-8 path").to_string();
    let (data, features, run) = (root.join("data"), root.join("features"), root.join("run"));
    let config = root.join("run.toml");
    std::fs::create_dir_all(root).map_err(e)?;
    std::fs::write(&config, REPRO_CONFIG).map_err(e)?;
    lseq(&["synth", "--preset", "tiny", "--seed", "42", "--out", &p(&data)])?;
    lseq(&["prepare", "--manifest", &p(&data.join("manifest.csv")), "--out", &p(&features), "--workers", "1"])?;
    lseq(&["train", "--config", &p(&config), "--features", &p(&features), "--steps", "200", "--workers", "1", "--run-dir", &p(&run)])?;
    Ok(run.join("best.ckpt"))
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e)?;
    let a = std::fs::read(pipeline_run(&tmp.path().join("a"))?).map_err(e)?;
    let b = std::fs::read(pipeline_run(&tmp.path().join("b"))?).map_err(e)?;
    Ok((a == b, format!("best checkpoints {} and {} bytes, {}", a.len(), b.len(), if a == b { "identical" } else { "differ" })))
}

// 9 -------------------------------------------------------------------------

fn checksum(a: &Array2<f64>) -> String {
    let mut h = Sha256::new();
    h.update(format!("{:?}", a.dim()));
    for v in a {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// First validation step reaching `target`, if any.
fn steps_to_reach(outcome: &TrainOutcome, target: f64) -> Option<u64> {
    outcome.history.iter().find(|r| r.validation_accuracy >= target).map(|r| r.step)
}

fn transfer() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e)?;
    let source = synth_features(&SynthConfig::small(101), &tmp.path().join("source"))?;
    let target = synth_features(&SynthConfig::tiny(202), &tmp.path().join("target"))?;
    let (src_train, src_val, _) = by_subject(source, 18, 2);
    let (tgt_train, tgt_val, _) = by_subject(target, 2, 4);
    let source_cfg = desk_model(Variant::Flat, 1, 20);
    let target_cfg = ModelConfig { fc_units: 24, ..source_cfg.clone() };

    let mut mechanism_ok = true;
    let mut passes = 0;
    let mut lines = Vec::new();
    for seed in 0..3 {
        // default learning rate; the epoch cap would otherwise end runs on the two-subject target early
        let tc = |steps| TrainConfig {
            max_steps: steps,
            max_train_epochs: 1000,
            validate_every: 100,
            early_stopping: false,
            seed,
            ..TrainConfig::default()
        };
        let (_, pre) = fit(&source_cfg, None, &src_train, &src_val, &tc(2000))?;

        let (_, mut init) = Model::build(&target_cfg, seed).map_err(e)?;
        let shapes: Vec<(String, (usize, usize))> = init.entries().iter().map(|x| (x.name.clone(), x.value.dim())).collect();
        let report = init_from_pretrained(&mut init, &pre.best, InitMode::Compatible).map_err(e)?;
        let expected_fresh: BTreeSet<&str> = shapes
            .iter()
            .filter(|(name, dim)| pre.best.by_name(name).is_none_or(|v| v.dim() != *dim))
            .map(|(name, _)| name.as_str())
            .collect();
        let fresh: BTreeSet<&str> = report.fresh.iter().map(String::as_str).collect();
        let copies_match = report.copied.iter().all(|n| init.by_name(n).map(checksum) == pre.best.by_name(n).map(checksum));
        let all_copied = report.copied.len() + report.fresh.len() == shapes.len()
            && shapes.iter().filter(|(n, _)| !n.starts_with("head.")).all(|(n, _)| report.copied.contains(n));
        mechanism_ok &= copies_match && all_copied && fresh == expected_fresh && fresh.iter().all(|n| n.starts_with("head."));

        let (_, scratch) = fit(&target_cfg, None, &tgt_train, &tgt_val, &tc(3000))?;
        // only the first half of the scratch run's steps can count
        let budget = (scratch.best_step / 2).max(1);
        let (_, tuned) = fit(&target_cfg, Some(init), &tgt_train, &tgt_val, &tc(budget))?;
        let reached = steps_to_reach(&tuned, scratch.best_accuracy);
        let pass = reached.is_some_and(|s| 2 * s <= scratch.best_step);
        passes += usize::from(pass);
        lines.push(format!(
            "seed {seed}: scratch best {:.3} at step {}, finetuned {} within {budget} steps (best {:.3})",
            scratch.best_accuracy,
            scratch.best_step,
            reached.map_or("never reaches it".into(), |s| format!("reaches it at {s}")),
            tuned.best_accuracy
        ));
    }
    Ok((
        mechanism_ok && passes >= 2,
        format!("checksums and fresh list {}; {passes}/3 seeds within half the steps; {}", if mechanism_ok { "ok" } else { "WRONG" }, lines.join("; ")),
    ))
}

// 10 ------------------------------------------------------------------------

fn documentation() -> Outcome {
    let readme = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).map_err(e)?;
    let present = ["88.4", "0.838", "81.4"].iter().all(|v| readme.contains(v));
    Ok((present, "reference values listed in README; not asserted against any run".into()))
}
