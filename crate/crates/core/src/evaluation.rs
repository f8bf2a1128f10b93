//! Staging metrics, whole-recording scoring and cross-validation folds.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::FeatureRecording;
use crate::frontend::{Stage, NUM_CLASSES};
use crate::model::{Model, SequenceBatch};
use crate::params::ParamStore;

/// Counts with reference stages on rows and predictions on columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self { counts: [[0; NUM_CLASSES]; NUM_CLASSES] }
    }
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn add(&mut self, reference: Stage, predicted: Stage) {
        self.counts[reference.index()][predicted.index()] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (c, v) in row.iter_mut().zip(o) {
                *c += v;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    /// Misclassified epochs per reference stage.
    pub fn errors_per_class(&self) -> [u64; NUM_CLASSES] {
        std::array::from_fn(|i| self.counts[i].iter().sum::<u64>() - self.counts[i][i])
    }

    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.total().max(1) as f64
    }
}

/// Conditions under which a metric fell back to a defined value.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricFlags {
    /// Classes absent from both reference and prediction (F1 set to 0).
    pub absent_classes: Vec<usize>,
    /// Expected agreement was 1, kappa set to 0.
    pub kappa_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub kappa: f64,
    pub macro_f1: f64,
    pub mean_sensitivity: f64,
    pub mean_specificity: f64,
    pub per_class_f1: Vec<f64>,
    pub total: u64,
    pub flags: MetricFlags,
}

impl MetricReport {
    /// Fixed-width table of the headline numbers.
    pub fn table(&self) -> String {
        let mut out = String::from("   Acc.      κ     MF1   Sens.   Spec. |");
        for s in Stage::ALL {
            out.push_str(&format!(" {:>6}", s.name()));
        }
        out.push('\n');
        out.push_str(&format!(
            "{:>7.4} {:>6.4} {:>7.4} {:>7.4} {:>7.4} |",
            self.accuracy, self.kappa, self.macro_f1, self.mean_sensitivity, self.mean_specificity
        ));
        for f in &self.per_class_f1 {
            out.push_str(&format!(" {f:>6.4}"));
        }
        out.push('\n');
        out
    }
}

/// Accuracy, Cohen's kappa, macro F1 and macro sensitivity/specificity.
/// Undefined ratios (zero denominators) are reported as 0.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Evaluation("confusion matrix is empty".into()));
    }
    let n = total as f64;
    let row: Vec<f64> = (0..NUM_CLASSES).map(|i| cm.counts[i].iter().sum::<u64>() as f64).collect();
    let col: Vec<f64> = (0..NUM_CLASSES).map(|j| (0..NUM_CLASSES).map(|i| cm.counts[i][j]).sum::<u64>() as f64).collect();
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };

    let mut flags = MetricFlags::default();
    let mut per_class_f1 = Vec::with_capacity(NUM_CLASSES);
    let mut sens = 0.0;
    let mut spec = 0.0;
    for c in 0..NUM_CLASSES {
        let tp = cm.counts[c][c] as f64;
        let fp = col[c] - tp;
        let fn_ = row[c] - tp;
        let tn = n - tp - fp - fn_;
        if row[c] == 0.0 && col[c] == 0.0 {
            flags.absent_classes.push(c);
        }
        per_class_f1.push(ratio(2.0 * tp, 2.0 * tp + fp + fn_));
        sens += ratio(tp, tp + fn_);
        spec += ratio(tn, tn + fp);
    }
    let p_o = cm.correct() as f64 / n;
    let p_e = row.iter().zip(&col).map(|(r, c)| r * c).sum::<f64>() / (n * n);
    let kappa = if 1.0 - p_e == 0.0 {
        flags.kappa_degenerate = true;
        0.0
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };
    Ok(MetricReport {
        accuracy: p_o,
        kappa,
        macro_f1: per_class_f1.iter().sum::<f64>() / NUM_CLASSES as f64,
        mean_sensitivity: sens / NUM_CLASSES as f64,
        mean_specificity: spec / NUM_CLASSES as f64,
        per_class_f1,
        total,
        flags,
    })
}

/// Anything that maps a batch of sequences to per-epoch posteriors.
pub trait SequenceScorer {
    fn seq_len(&self) -> usize;

    /// One `[L, C]` posterior matrix per sequence of the batch.
    fn posteriors(&self, batch: &SequenceBatch) -> Result<Vec<Array2<f64>>>;
}

/// A model with frozen parameters.
pub struct TrainedModel<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore,
}

impl SequenceScorer for TrainedModel<'_> {
    fn seq_len(&self) -> usize {
        self.model.config.seq_len
    }

    fn posteriors(&self, batch: &SequenceBatch) -> Result<Vec<Array2<f64>>> {
        Ok(self.model.predict(self.params, batch)?.into_iter().map(|p| p.probabilities).collect())
    }
}

/// Averaged posteriors and final labels of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingPrediction {
    pub recording_id: String,
    /// `[R, C]`.
    pub posteriors: Array2<f64>,
    pub predicted: Vec<Stage>,
}

impl RecordingPrediction {
    /// Confusion matrix over valid epochs.
    pub fn confusion(&self, rec: &FeatureRecording) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new();
        for (i, &p) in self.predicted.iter().enumerate() {
            if let Some(r) = rec.hypnogram.stage(i) {
                cm.add(r, p);
            }
        }
        cm
    }
}

/// Window start positions covering `0..len` with the given stride. When the
/// stride does not land on the end, a final window aligned to the end is
/// added.
pub fn window_starts(len: usize, seq_len: usize, stride: usize) -> Vec<usize> {
    if len <= seq_len {
        return vec![0];
    }
    let last = len - seq_len;
    let mut starts: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if *starts.last().expect("non-empty") != last {
        starts.push(last);
    }
    starts
}

/// Builds the batch for windows starting at `starts`. Positions past the end
/// of a short recording repeat its final epoch and are masked.
pub fn window_batch(rec: &FeatureRecording, starts: &[usize], seq_len: usize) -> Result<SequenceBatch> {
    let len = rec.len();
    let mut idx = Vec::with_capacity(starts.len() * seq_len);
    let mut labels = Vec::with_capacity(idx.capacity());
    let mut mask = Vec::with_capacity(idx.capacity());
    for &s in starts {
        for ell in 0..seq_len {
            let e = s + ell;
            let inside = e < len;
            let e = e.min(len - 1);
            idx.push(e);
            labels.push(rec.hypnogram.stages[e].index());
            mask.push(inside && rec.hypnogram.valid_mask[e]);
        }
    }
    SequenceBatch::from_images(starts.len(), seq_len, idx.iter().map(|&e| rec.image(e)), labels, mask)
}

/// Slides windows over a recording, averages overlapping posteriors and
/// takes the argmax per epoch.
pub fn score_recording(
    scorer: &dyn SequenceScorer,
    rec: &FeatureRecording,
    stride: usize,
    batch_size: usize,
) -> Result<RecordingPrediction> {
    let len = rec.len();
    if len == 0 {
        return Err(Error::Evaluation(format!("{} has no epochs", rec.recording_id)));
    }
    let seq_len = scorer.seq_len();
    let starts = window_starts(len, seq_len, stride);
    let mut sum = Array2::<f64>::zeros((len, NUM_CLASSES));
    let mut count = vec![0usize; len];
    for chunk in starts.chunks(batch_size.max(1)) {
        let batch = window_batch(rec, chunk, seq_len)?;
        let posts = scorer.posteriors(&batch)?;
        for (&s, post) in chunk.iter().zip(&posts) {
            for ell in 0..seq_len.min(len - s) {
                let mut row = sum.row_mut(s + ell);
                row += &post.row(ell);
                count[s + ell] += 1;
            }
        }
    }
    for (mut row, &c) in sum.rows_mut().into_iter().zip(&count) {
        row /= c as f64;
    }
    let predicted = sum
        .rows()
        .into_iter()
        .map(|r| {
            let best = r.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
            Stage::from_index(best).expect("class index")
        })
        .collect();
    Ok(RecordingPrediction { recording_id: rec.recording_id.clone(), posteriors: sum, predicted })
}

/// Per-recording result for distribution plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingScore {
    pub recording_id: String,
    pub subject_id: String,
    pub epochs: u64,
    pub accuracy: f64,
    #[serde(skip)]
    pub confusion: ConfusionMatrix,
}

/// Scores each recording; returns per-recording scores and the pooled matrix.
/// Recordings are split across `workers` threads.
pub fn evaluate_recordings<S>(scorer: &S, recordings: &[FeatureRecording], stride: usize, batch_size: usize, workers: usize) -> Result<(Vec<RecordingScore>, ConfusionMatrix)>
where
    S: SequenceScorer + Sync,
{
    let score_one = |rec: &FeatureRecording| -> Result<RecordingScore> {
        let pred = score_recording(scorer, rec, stride, batch_size)?;
        let cm = pred.confusion(rec);
        Ok(RecordingScore {
            recording_id: rec.recording_id.clone(),
            subject_id: rec.subject_id.clone(),
            epochs: cm.total(),
            accuracy: cm.accuracy(),
            confusion: cm,
        })
    };
    let workers = workers.max(1).min(recordings.len().max(1));
    let scores: Vec<RecordingScore> = if workers == 1 {
        recordings.iter().map(score_one).collect::<Result<_>>()?
    } else {
        let chunk = recordings.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = recordings
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(score_one).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(recordings.len());
            for h in handles {
                out.extend(h.join().expect("scoring thread panicked")?);
            }
            Ok::<_, Error>(out)
        })?
    };
    let mut pooled = ConfusionMatrix::new();
    for s in &scores {
        pooled.merge(&s.confusion);
    }
    Ok((scores, pooled))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Protocol {
    /// Leave one subject out.
    Loso,
    /// A single random subject split with the given training share.
    Split { train_fraction: f64 },
}

/// Subject assignment of one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Partitions subjects into folds. `validation_subjects` are drawn from each
/// fold's non-test subjects with the seeded generator.
pub fn make_folds(subjects: &[String], protocol: Protocol, validation_subjects: usize, seed: u64) -> Result<Vec<Fold>> {
    let unique: Vec<String> = subjects.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let folds = match protocol {
        Protocol::Loso => {
            if unique.len() < 2 {
                return Err(Error::Evaluation(format!("leave-one-subject-out needs 2 subjects, got {}", unique.len())));
            }
            unique
                .iter()
                .enumerate()
                .map(|(index, test)| {
                    let mut rest: Vec<String> = unique.iter().filter(|s| *s != test).cloned().collect();
                    rest.shuffle(&mut rng);
                    let nv = validation_subjects.min(rest.len() - 1);
                    let validation = rest.split_off(rest.len() - nv);
                    rest.sort();
                    Fold { index, train: rest, validation: sorted(validation), test: vec![test.clone()] }
                })
                .collect()
        }
        Protocol::Split { train_fraction } => {
            if !(0.0 < train_fraction && train_fraction < 1.0) {
                return Err(Error::Evaluation(format!("train fraction {train_fraction} outside (0, 1)")));
            }
            let mut all = unique.clone();
            all.shuffle(&mut rng);
            let n_test = ((1.0 - train_fraction) * all.len() as f64).round().max(1.0) as usize;
            if n_test >= all.len() {
                return Err(Error::Evaluation("split leaves no training subjects".into()));
            }
            let test = all.split_off(all.len() - n_test);
            let nv = validation_subjects.min(all.len() - 1);
            let validation = all.split_off(all.len() - nv);
            vec![Fold { index: 0, train: sorted(all), validation: sorted(validation), test: sorted(test) }]
        }
    };
    check_folds(&folds)?;
    Ok(folds)
}

fn sorted(mut v: Vec<String>) -> Vec<String> {
    v.sort();
    v
}

/// A subject may be tested in one fold only and never shares a fold's
/// train/validation/test roles.
pub fn check_folds(folds: &[Fold]) -> Result<()> {
    let mut tested: BTreeMap<&str, usize> = BTreeMap::new();
    for f in folds {
        for s in &f.test {
            if let Some(prev) = tested.insert(s, f.index) {
                return Err(Error::Evaluation(format!("subject {s} is tested in folds {prev} and {}", f.index)));
            }
        }
        let roles = [&f.train, &f.validation, &f.test];
        for (i, a) in roles.iter().enumerate() {
            for b in &roles[i + 1..] {
                if let Some(s) = a.iter().find(|s| b.contains(s)) {
                    return Err(Error::Evaluation(format!("subject {s} appears in two roles of fold {}", f.index)));
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub repetition: usize,
    pub fold: Fold,
    pub confusion: ConfusionMatrix,
    pub report: MetricReport,
    pub recordings: Vec<RecordingScore>,
}

/// Mean and standard deviation of the headline metrics over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpread {
    pub mean: MetricReport,
    pub std: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<FoldReport>,
    /// Pooled report per repetition.
    pub repetitions: Vec<MetricReport>,
    pub pooled: ConfusionMatrix,
    pub aggregate: MetricSpread,
}

/// Runs `run_fold` for every fold of every repetition. Each repetition
/// reseeds the fold construction; metrics are computed on the confusion
/// matrix pooled over the repetition's folds.
pub fn cross_validate<F>(
    subjects: &[String],
    protocol: Protocol,
    repetitions: usize,
    validation_subjects: usize,
    seed: u64,
    mut run_fold: F,
) -> Result<CrossValidation>
where
    F: FnMut(&Fold, usize) -> Result<Vec<RecordingScore>>,
{
    if repetitions == 0 {
        return Err(Error::Evaluation("at least one repetition is required".into()));
    }
    let mut folds = Vec::new();
    let mut reports = Vec::new();
    let mut pooled_all = ConfusionMatrix::new();
    for rep in 0..repetitions {
        let mut pooled = ConfusionMatrix::new();
        for fold in make_folds(subjects, protocol, validation_subjects, seed.wrapping_add(rep as u64))? {
            let recordings = run_fold(&fold, rep)?;
            let mut cm = ConfusionMatrix::new();
            for r in &recordings {
                cm.merge(&r.confusion);
            }
            pooled.merge(&cm);
            let report = compute_metrics(&cm)?;
            folds.push(FoldReport { repetition: rep, fold, confusion: cm, report, recordings });
        }
        pooled_all.merge(&pooled);
        reports.push(compute_metrics(&pooled)?);
    }
    let aggregate = spread(&reports);
    Ok(CrossValidation { folds, repetitions: reports, pooled: pooled_all, aggregate })
}

fn spread(reports: &[MetricReport]) -> MetricSpread {
    let n = reports.len() as f64;
    let stat = |f: &dyn Fn(&MetricReport) -> f64| {
        // shifted by the first value so identical repetitions give exactly 0
        let x0 = f(&reports[0]);
        let shift = reports.iter().map(|r| f(r) - x0).sum::<f64>() / n;
        let var = reports.iter().map(|r| (f(r) - x0 - shift).powi(2)).sum::<f64>() / n;
        (x0 + shift, var.sqrt())
    };
    let build = |pick: fn((f64, f64)) -> f64| MetricReport {
        accuracy: pick(stat(&|r| r.accuracy)),
        kappa: pick(stat(&|r| r.kappa)),
        macro_f1: pick(stat(&|r| r.macro_f1)),
        mean_sensitivity: pick(stat(&|r| r.mean_sensitivity)),
        mean_specificity: pick(stat(&|r| r.mean_specificity)),
        per_class_f1: (0..NUM_CLASSES).map(|c| pick(stat(&|r| r.per_class_f1[c]))).collect(),
        total: reports.iter().map(|r| r.total).sum(),
        flags: MetricFlags::default(),
    };
    MetricSpread { mean: build(|s| s.0), std: build(|s| s.1) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::Rng;

    use crate::frontend::Hypnogram;

    /// Metrics from definitions, over the expanded list of epoch pairs.
    fn oracle(cm: &ConfusionMatrix) -> (f64, f64, Vec<f64>, f64, f64) {
        let mut pairs = Vec::new();
        for r in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                for _ in 0..cm.counts[r][p] {
                    pairs.push((r, p));
                }
            }
        }
        let n = pairs.len() as f64;
        let acc = pairs.iter().filter(|(r, p)| r == p).count() as f64 / n;
        let mut pe = 0.0;
        let mut f1 = Vec::new();
        let mut sens = Vec::new();
        let mut spec = Vec::new();
        for c in 0..NUM_CLASSES {
            let ref_c = pairs.iter().filter(|(r, _)| *r == c).count() as f64;
            let pred_c = pairs.iter().filter(|(_, p)| *p == c).count() as f64;
            pe += (ref_c / n) * (pred_c / n);
            let tp = pairs.iter().filter(|&&(r, p)| r == c && p == c).count() as f64;
            let tn = pairs.iter().filter(|&&(r, p)| r != c && p != c).count() as f64;
            let precision = if pred_c > 0.0 { tp / pred_c } else { 0.0 };
            let recall = if ref_c > 0.0 { tp / ref_c } else { 0.0 };
            f1.push(if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 });
            sens.push(recall);
            let negatives = n - ref_c;
            spec.push(if negatives > 0.0 { tn / negatives } else { 0.0 });
        }
        let kappa = if pe == 1.0 { 0.0 } else { (acc - pe) / (1.0 - pe) };
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (acc, kappa, f1.clone(), mean(&sens), mean(&spec))
    }

    fn random_cm(rng: &mut ChaCha8Rng) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new();
        for r in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                cm.counts[r][p] = if rng.gen_bool(0.2) { 0 } else { rng.gen_range(0..40) };
            }
        }
        cm.counts[0][0] += 1;
        cm
    }

    #[test]
    fn metrics_match_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let cm = random_cm(&mut rng);
            let m = compute_metrics(&cm).unwrap();
            let (acc, kappa, f1, sens, spec) = oracle(&cm);
            assert!((m.accuracy - acc).abs() < 1e-12);
            assert!((m.kappa - kappa).abs() < 1e-12);
            for (a, b) in m.per_class_f1.iter().zip(&f1) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((m.macro_f1 - f1.iter().sum::<f64>() / 5.0).abs() < 1e-12);
            assert!((m.mean_sensitivity - sens).abs() < 1e-12);
            assert!((m.mean_specificity - spec).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_is_perfect() {
        let mut cm = ConfusionMatrix::new();
        for c in 0..NUM_CLASSES {
            cm.counts[c][c] = 10 + c as u64;
        }
        let m = compute_metrics(&cm).unwrap();
        assert_eq!((m.accuracy, m.kappa, m.macro_f1), (1.0, 1.0, 1.0));
        assert_eq!((m.mean_sensitivity, m.mean_specificity), (1.0, 1.0));
    }

    #[test]
    fn majority_constant_prediction_has_zero_kappa() {
        let mut cm = ConfusionMatrix::new();
        cm.counts[2][2] = 60;
        cm.counts[0][2] = 40;
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.kappa, 0.0);
        assert!(!m.flags.kappa_degenerate);
        assert_eq!(m.flags.absent_classes, vec![1, 3, 4]);
    }

    #[test]
    fn single_class_agreement_flags_degenerate_kappa() {
        let mut cm = ConfusionMatrix::new();
        cm.counts[1][1] = 7;
        let m = compute_metrics(&cm).unwrap();
        assert!(m.flags.kappa_degenerate);
        assert_eq!(m.kappa, 0.0);
        assert!(compute_metrics(&ConfusionMatrix::new()).is_err());
    }

    proptest! {
        #[test]
        fn kappa_invariant_under_relabeling(seed in 0u64..500, perm_seed in 0u64..500) {
            let cm = random_cm(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut perm: Vec<usize> = (0..NUM_CLASSES).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let mut permuted = ConfusionMatrix::new();
            for r in 0..NUM_CLASSES {
                for p in 0..NUM_CLASSES {
                    permuted.counts[perm[r]][perm[p]] = cm.counts[r][p];
                }
            }
            let a = compute_metrics(&cm).unwrap().kappa;
            let b = compute_metrics(&permuted).unwrap().kappa;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    /// Returns a fixed posterior per epoch derived from the window start, so
    /// overlap averaging is observable.
    struct StartScorer {
        seq_len: usize,
    }

    impl SequenceScorer for StartScorer {
        fn seq_len(&self) -> usize {
            self.seq_len
        }

        fn posteriors(&self, batch: &SequenceBatch) -> Result<Vec<Array2<f64>>> {
            // image values encode the epoch index
            Ok((0..batch.sequences)
                .map(|s| {
                    let start = batch.images[[s * self.seq_len, 0]];
                    Array2::from_shape_fn((self.seq_len, NUM_CLASSES), |(ell, c)| {
                        let w = ((start as usize + 1) * (c + 1) + ell) as f64;
                        w / (1..=NUM_CLASSES).map(|k| ((start as usize + 1) * k + ell) as f64).sum::<f64>()
                    })
                })
                .collect())
        }
    }

    fn recording(len: usize) -> FeatureRecording {
        let images = Array3::from_shape_fn((len, 2, 3), |(e, _, _)| e as f32);
        let stages = (0..len).map(|i| Stage::from_index(i % 5).unwrap()).collect();
        FeatureRecording {
            recording_id: "r".into(),
            subject_id: "s".into(),
            first_epoch: 0,
            images,
            hypnogram: Hypnogram::from_stages("r", stages),
        }
    }

    #[test]
    fn window_starts_cover_the_recording() {
        assert_eq!(window_starts(10, 10, 10), vec![0]);
        assert_eq!(window_starts(20, 10, 10), vec![0, 10]);
        assert_eq!(window_starts(11, 10, 1), vec![0, 1]);
        assert_eq!(window_starts(25, 10, 10), vec![0, 10, 15]);
        assert_eq!(window_starts(4, 10, 10), vec![0]);
    }

    #[test]
    fn overlap_average_matches_explicit_loop() {
        let l = 4;
        let rec = recording(l + 1);
        let scorer = StartScorer { seq_len: l };
        let pred = score_recording(&scorer, &rec, 1, 8).unwrap();
        // explicit: epoch e receives windows s with s <= e < s + l
        for e in 0..=l {
            for c in 0..NUM_CLASSES {
                let mut acc = 0.0;
                let mut n = 0.0;
                for s in 0..=1usize {
                    if s <= e && e < s + l {
                        let ell = e - s;
                        let w = |k: usize| ((s + 1) * k + ell) as f64;
                        acc += w(c + 1) / (1..=NUM_CLASSES).map(w).sum::<f64>();
                        n += 1.0;
                    }
                }
                assert!((pred.posteriors[[e, c]] - acc / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn short_recording_is_padded_and_masked() {
        let rec = recording(3);
        let batch = window_batch(&rec, &[0], 5).unwrap();
        assert_eq!(batch.mask, vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(batch.images[[4, 0]], 2.0);
        let pred = score_recording(&StartScorer { seq_len: 5 }, &rec, 5, 1).unwrap();
        assert_eq!(pred.predicted.len(), 3);
    }

    #[test]
    fn loso_folds_test_each_subject_once() {
        let subjects: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let folds = make_folds(&subjects, Protocol::Loso, 1, 0).unwrap();
        assert_eq!(folds.len(), 3);
        for (f, s) in folds.iter().zip(&subjects) {
            assert_eq!(f.test, vec![s.clone()]);
            assert_eq!(f.train.len() + f.validation.len(), 2);
        }
        assert!(make_folds(&subjects[..1], Protocol::Loso, 0, 0).is_err());
    }

    #[test]
    fn overlapping_folds_rejected() {
        let fold = |i: usize, test: &str| Fold { index: i, train: vec![], validation: vec![], test: vec![test.into()] };
        assert!(check_folds(&[fold(0, "a"), fold(1, "a")]).is_err());
        let bad = Fold { index: 0, train: vec!["a".into()], validation: vec![], test: vec!["a".into()] };
        assert!(check_folds(&[bad]).is_err());
    }

    #[test]
    fn split_partitions_subjects() {
        let subjects: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let folds = make_folds(&subjects, Protocol::Split { train_fraction: 0.7 }, 1, 3).unwrap();
        let f = &folds[0];
        assert_eq!(f.test.len(), 3);
        assert_eq!(f.validation.len(), 1);
        assert_eq!(f.train.len(), 6);
    }

    fn fake_scores(fold: &Fold) -> Vec<RecordingScore> {
        fold.test
            .iter()
            .map(|s| {
                let k = s.bytes().last().unwrap() as u64;
                let mut cm = ConfusionMatrix::new();
                cm.counts[0][0] = 5 + k % 3;
                cm.counts[1][0] = 2;
                cm.counts[2][2] = 4;
                RecordingScore {
                    recording_id: s.clone(),
                    subject_id: s.clone(),
                    epochs: cm.total(),
                    accuracy: cm.accuracy(),
                    confusion: cm,
                }
            })
            .collect()
    }

    #[test]
    fn pooled_matrix_sums_folds_and_accuracy_is_epoch_weighted() {
        let subjects: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let cv = cross_validate(&subjects, Protocol::Loso, 1, 1, 0, |f, _| Ok(fake_scores(f))).unwrap();
        assert_eq!(cv.folds.len(), 3);
        let mut sum = ConfusionMatrix::new();
        for f in &cv.folds {
            sum.merge(&f.confusion);
        }
        assert_eq!(sum, cv.pooled);
        let weighted = cv.folds.iter().map(|f| f.report.accuracy * f.report.total as f64).sum::<f64>()
            / cv.folds.iter().map(|f| f.report.total as f64).sum::<f64>();
        assert!((weighted - cv.repetitions[0].accuracy).abs() < 1e-12);
    }

    #[test]
    fn deterministic_repetitions_have_zero_spread() {
        let subjects: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
        let cv = cross_validate(&subjects, Protocol::Split { train_fraction: 0.7 }, 5, 1, 0, |_, _| {
            Ok(fake_scores(&Fold { index: 0, train: vec![], validation: vec![], test: vec!["x".into()] }))
        })
        .unwrap();
        assert_eq!(cv.repetitions.len(), 5);
        assert_eq!(cv.aggregate.std.accuracy, 0.0);
        assert_eq!(cv.aggregate.std.kappa, 0.0);
    }
}
