use std::path::Path;

use anyhow::{Context, Result};
use lseq_core::evaluation::{
    compute_metrics, cross_validate, evaluate_recordings, ConfusionMatrix, CrossValidation, MetricReport, RecordingScore,
    SequenceScorer, TrainedModel,
};
use lseq_core::formats::FeatureRecording;
use lseq_core::frontend::Stage;
use lseq_core::{Checkpoint, Model, RunConfig};
use serde::Serialize;

use crate::plot;
use crate::runs::{create_dir, load_features, select, subjects_of, write_json, write_text, SubjectSplit};
use crate::train::{fit, initialize, Start};

#[derive(Debug, Serialize)]
struct RecordingRow<'a> {
    repetition: usize,
    fold: usize,
    recording_id: &'a str,
    subject_id: &'a str,
    epochs: u64,
    accuracy: f64,
}

/// `reference,W,N1,N2,N3,REM,errors`, one row per reference stage.
pub fn confusion_csv(cm: &ConfusionMatrix) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["reference".to_string()];
    header.extend(Stage::ALL.iter().map(|s| s.name().to_string()));
    header.push("errors".into());
    w.write_record(&header)?;
    let errors = cm.errors_per_class();
    for (r, stage) in Stage::ALL.iter().enumerate() {
        let mut row = vec![stage.name().to_string()];
        row.extend(cm.counts[r].iter().map(u64::to_string));
        row.push(errors[r].to_string());
        w.write_record(&row)?;
    }
    Ok(w.into_inner()?)
}

fn recordings_csv(groups: &[(usize, usize, &[RecordingScore])]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for &(repetition, fold, scores) in groups {
        for s in scores {
            w.serialize(RecordingRow {
                repetition,
                fold,
                recording_id: &s.recording_id,
                subject_id: &s.subject_id,
                epochs: s.epochs,
                accuracy: s.accuracy,
            })?;
        }
    }
    Ok(w.into_inner()?)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Serialize)]
struct SingleReport<'a> {
    report: &'a MetricReport,
    confusion: &'a ConfusionMatrix,
    recordings: &'a [RecordingScore],
}

/// Scores recordings with any scorer and writes `report.json`,
/// `report.txt`, `confusion.csv`, `recordings.csv`, `confusion.svg` and
/// `recordings.svg` into `out_dir`.
pub fn evaluate_scorer<S>(
    scorer: &S,
    recordings: &[FeatureRecording],
    stride: usize,
    batch_size: usize,
    workers: usize,
    out_dir: &Path,
) -> Result<MetricReport>
where
    S: SequenceScorer + Sync,
{
    create_dir(out_dir)?;
    let (scores, cm) = evaluate_recordings(scorer, recordings, stride, batch_size, workers)?;
    let report = compute_metrics(&cm)?;
    write_json(&out_dir.join("report.json"), &SingleReport { report: &report, confusion: &cm, recordings: &scores })?;
    write_text(&out_dir.join("report.txt"), &report.table())?;
    write_bytes(&out_dir.join("confusion.csv"), &confusion_csv(&cm)?)?;
    write_bytes(&out_dir.join("recordings.csv"), &recordings_csv(&[(0, 0, &scores)])?)?;
    write_text(&out_dir.join("confusion.svg"), &plot::confusion_heatmap(&cm))?;
    let all: Vec<&RecordingScore> = scores.iter().collect();
    write_text(&out_dir.join("recordings.svg"), &plot::strip_plot(&[("all".to_string(), all)]))?;
    Ok(report)
}

/// Evaluates a trained checkpoint on every archive of `features`, or only
/// on the given subjects.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    features: &Path,
    subjects: &[String],
    stride: usize,
    batch_size: usize,
    workers: usize,
    out_dir: &Path,
) -> Result<MetricReport> {
    let ck = Checkpoint::read(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let (model, mut params) = Model::build(&ck.meta.model, 0)?;
    ck.load_into(&ck.meta.model, &mut params)?;
    let mut recordings = load_features(features)?;
    if !subjects.is_empty() {
        recordings = select(&recordings, subjects);
    }
    let stride = if stride == 0 { model.config.seq_len } else { stride };
    evaluate_scorer(&TrainedModel { model: &model, params: &params }, &recordings, stride, batch_size, workers, out_dir)
}

#[derive(Debug, Serialize)]
struct Aggregate<'a> {
    protocol: lseq_core::evaluation::Protocol,
    repetitions: &'a [MetricReport],
    pooled: &'a ConfusionMatrix,
    mean: &'a MetricReport,
    std: &'a MetricReport,
}

fn aggregate_table(cv: &CrossValidation) -> String {
    let (m, s) = (&cv.aggregate.mean, &cv.aggregate.std);
    let mut out = format!("{} folds over {} repetition(s)\n", cv.folds.len(), cv.repetitions.len());
    for (name, mean, std) in [
        ("accuracy", m.accuracy, s.accuracy),
        ("kappa", m.kappa, s.kappa),
        ("macro F1", m.macro_f1, s.macro_f1),
        ("sensitivity", m.mean_sensitivity, s.mean_sensitivity),
        ("specificity", m.mean_specificity, s.mean_specificity),
    ] {
        out.push_str(&format!("{name:<12} {mean:.4} ± {std:.4}\n"));
    }
    for (c, stage) in Stage::ALL.iter().enumerate() {
        out.push_str(&format!("F1 {:<9} {:.4} ± {:.4}\n", stage.name(), m.per_class_f1[c], s.per_class_f1[c]));
    }
    out
}

/// Cross-validation with one training run per fold. Each fold's run
/// directory, `fold_r{rep}_f{index}.json` per fold, and aggregate files
/// land in `out_dir`.
pub fn cross_validate_runs(config: &RunConfig, out_dir: &Path) -> Result<CrossValidation> {
    config.validate()?;
    create_dir(out_dir)?;
    write_text(&out_dir.join("config.toml"), &config.to_toml())?;
    let recordings = load_features(&config.data.features)?;
    let subjects = subjects_of(&recordings);
    let stride = config.eval.effective_stride(config.model.seq_len);
    let cv = cross_validate(
        &subjects,
        config.eval.protocol,
        config.eval.repetitions,
        config.eval.validation_subjects,
        config.train.seed,
        |fold, rep| {
            let split = SubjectSplit::from_fold(fold);
            let mut fold_config = config.clone();
            fold_config.train.seed = config.train.seed.wrapping_add(rep as u64);
            let run_dir = out_dir.join(format!("run_r{rep}_f{}", fold.index));
            create_dir(&run_dir).map_err(|e| lseq_core::Error::Evaluation(e.to_string()))?;
            log::info!("repetition {rep} fold {}: test {}", fold.index, split.test.join(" "));
            let fit_fold = || -> Result<Vec<RecordingScore>> {
                let (model, store, _, _) = initialize(&fold_config, &Start::Fresh)?;
                let outcome = fit(
                    &fold_config,
                    &model,
                    store,
                    None,
                    &select(&recordings, &split.train),
                    &select(&recordings, &split.validation),
                    &run_dir,
                )?;
                let scorer = TrainedModel { model: &model, params: &outcome.best };
                let test = select(&recordings, &split.test);
                let (scores, _) = evaluate_recordings(&scorer, &test, stride, config.eval.batch_size, config.train.workers)?;
                Ok(scores)
            };
            fit_fold().map_err(|e| lseq_core::Error::Evaluation(format!("fold {}: {e:#}", fold.index)))
        },
    )?;
    for f in &cv.folds {
        write_json(&out_dir.join(format!("fold_r{}_f{}.json", f.repetition, f.fold.index)), f)?;
    }
    write_json(
        &out_dir.join("aggregate.json"),
        &Aggregate {
            protocol: config.eval.protocol,
            repetitions: &cv.repetitions,
            pooled: &cv.pooled,
            mean: &cv.aggregate.mean,
            std: &cv.aggregate.std,
        },
    )?;
    write_text(&out_dir.join("aggregate.txt"), &aggregate_table(&cv))?;
    write_bytes(&out_dir.join("confusion.csv"), &confusion_csv(&cv.pooled)?)?;
    let groups: Vec<(usize, usize, &[RecordingScore])> =
        cv.folds.iter().map(|f| (f.repetition, f.fold.index, f.recordings.as_slice())).collect();
    write_bytes(&out_dir.join("recordings.csv"), &recordings_csv(&groups)?)?;
    write_text(&out_dir.join("confusion.svg"), &plot::confusion_heatmap(&cv.pooled))?;
    let strips: Vec<(String, Vec<&RecordingScore>)> = cv
        .folds
        .iter()
        .map(|f| (format!("r{} f{}", f.repetition, f.fold.index), f.recordings.iter().collect()))
        .collect();
    write_text(&out_dir.join("recordings.svg"), &plot::strip_plot(&strips))?;
    Ok(cv)
}
