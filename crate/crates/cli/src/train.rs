use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lseq_core::checkpoint::CheckpointMeta;
use lseq_core::evaluation::{compute_metrics, evaluate_recordings, MetricReport, TrainedModel};
use lseq_core::formats::FeatureRecording;
use lseq_core::optim::AdamState;
use lseq_core::params::format_census;
use lseq_core::train::{init_from_pretrained, train, InitMode, StopReason, TrainOutcome, TransferReport, ValidationRecord};
use lseq_core::{Checkpoint, Model, ParamStore, RunConfig};
use serde::Serialize;

use crate::runs::{create_dir, load_features, select, subjects_of, write_json, write_text, SubjectSplit};

/// How a run's parameters start.
#[derive(Debug, Clone, Default)]
pub enum Start {
    #[default]
    Fresh,
    /// Copy tensors from a pretrained checkpoint; the optimizer starts over.
    Pretrained { checkpoint: PathBuf, mode: InitMode },
    /// Continue parameters and optimizer state of an earlier run.
    Resume { checkpoint: PathBuf },
}

#[derive(Debug, Clone)]
pub struct TrainRequest {
    pub config: RunConfig,
    pub run_dir: PathBuf,
    pub start: Start,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub split: SubjectSplit,
    pub steps: u64,
    pub best_step: u64,
    pub best_accuracy: f64,
    pub stop: StopReason,
    pub transfer: Option<TransferReport>,
    pub test: Option<MetricReport>,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Builds the model of `config` and applies the start mode. Returns the
/// parameters, an optimizer state to resume and the transfer report.
pub fn initialize(config: &RunConfig, start: &Start) -> Result<(Model, ParamStore, Option<AdamState>, Option<TransferReport>)> {
    let (model, mut store) = Model::build(&config.model, config.train.seed)?;
    match start {
        Start::Fresh => Ok((model, store, None, None)),
        Start::Pretrained { checkpoint, mode } => {
            let ck = Checkpoint::read(checkpoint).with_context(|| format!("loading pretrained checkpoint {}", checkpoint.display()))?;
            let report = init_from_pretrained(&mut store, &ck.params, *mode)
                .with_context(|| format!("initializing from {}", checkpoint.display()))?;
            Ok((model, store, None, Some(report)))
        }
        Start::Resume { checkpoint } => {
            let ck = Checkpoint::read(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let Some(state) = ck.optimizer.clone() else {
                bail!("{} holds no optimizer state; resume from a last.ckpt", checkpoint.display());
            };
            ck.load_into(&config.model, &mut store).with_context(|| format!("resuming from {}", checkpoint.display()))?;
            Ok((model, store, Some(state), None))
        }
    }
}

fn checkpoint(config: &RunConfig, params: ParamStore, optimizer: Option<AdamState>, step: u64, best_step: u64, best_accuracy: f64) -> Checkpoint {
    Checkpoint { meta: CheckpointMeta { model: config.model.clone(), step, best_step, best_accuracy }, params, optimizer }
}

/// Trains on `train_set`, validating on `validation_set`, and writes
/// `metrics.csv`, `best.ckpt` and `last.ckpt` into `run_dir`.
pub fn fit(
    config: &RunConfig,
    model: &Model,
    store: ParamStore,
    resume: Option<AdamState>,
    train_set: &[FeatureRecording],
    validation_set: &[FeatureRecording],
    run_dir: &Path,
) -> Result<TrainOutcome> {
    let metrics_path = run_dir.join("metrics.csv");
    let append = resume.is_some() && metrics_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    let mut metrics = csv::WriterBuilder::new().has_headers(!append).from_writer(file);
    let best_path = run_dir.join(BEST_CHECKPOINT);
    let on_validation = |record: &ValidationRecord, params: &ParamStore, improved: bool| -> lseq_core::Result<()> {
        metrics.serialize(record)?;
        metrics.flush().map_err(|e| lseq_core::Error::io(&metrics_path, e))?;
        if improved {
            checkpoint(config, params.clone(), None, record.step, record.step, record.validation_accuracy).write(&best_path)?;
        }
        Ok(())
    };
    let outcome = train(model, store, resume, train_set, validation_set, &config.train, on_validation)?;
    checkpoint(config, outcome.best.clone(), None, outcome.best_step, outcome.best_step, outcome.best_accuracy).write(&best_path)?;
    checkpoint(config, outcome.last.clone(), Some(outcome.optimizer.clone()), outcome.steps, outcome.best_step, outcome.best_accuracy)
        .write(&run_dir.join(LAST_CHECKPOINT))?;
    Ok(outcome)
}

/// Scores recordings with frozen parameters and returns the pooled report.
pub fn test_report(config: &RunConfig, model: &Model, params: &ParamStore, recordings: &[FeatureRecording]) -> Result<MetricReport> {
    let scorer = TrainedModel { model, params };
    let stride = config.eval.effective_stride(config.model.seq_len);
    let (_, cm) = evaluate_recordings(&scorer, recordings, stride, config.eval.batch_size, config.train.workers)?;
    Ok(compute_metrics(&cm)?)
}

fn report_text(config: &RunConfig, summary: &RunSummary, census: &str) -> String {
    let mut out = String::new();
    let m = &config.model;
    out.push_str(&format!("variant            {}\n", m.variant));
    out.push_str(&format!("sequence length    {} ({} x {})\n", m.seq_len, m.fold_b, m.fold_k));
    out.push_str(&format!("sequential steps   {}\n", m.sequential_steps()));
    out.push_str(&format!("train subjects     {}\n", summary.split.train.join(" ")));
    out.push_str(&format!("validation         {}\n", summary.split.validation.join(" ")));
    out.push_str(&format!("test               {}\n", summary.split.test.join(" ")));
    out.push_str(&format!("steps              {}\n", summary.steps));
    out.push_str(&format!("stopped            {:?}\n", summary.stop));
    out.push_str(&format!("best step          {}\n", summary.best_step));
    out.push_str(&format!("best val accuracy  {:.4}\n", summary.best_accuracy));
    if let Some(t) = &summary.transfer {
        out.push_str(&format!("\ninitialized from pretrained: {} copied, {} fresh, {} unused\n", t.copied.len(), t.fresh.len(), t.unused.len()));
        for name in &t.fresh {
            out.push_str(&format!("  fresh  {name}\n"));
        }
        for name in &t.unused {
            out.push_str(&format!("  unused {name}\n"));
        }
    }
    if let Some(test) = &summary.test {
        out.push_str("\ntest metrics (best checkpoint)\n");
        out.push_str(&test.table());
    }
    out.push_str("\nparameters\n");
    out.push_str(census);
    out
}

/// A full training run: subject split, training, checkpoints, optional test
/// scoring and the text report.
pub fn run(request: &TrainRequest) -> Result<RunSummary> {
    let config = &request.config;
    config.validate()?;
    let run_dir = &request.run_dir;
    create_dir(run_dir)?;
    write_text(&run_dir.join("config.toml"), &config.to_toml())?;

    let recordings = load_features(&config.data.features)?;
    let split = SubjectSplit::new(&subjects_of(&recordings), config.data.validation_subjects, config.data.test_subjects, config.train.seed)?;
    let train_set = select(&recordings, &split.train);
    let validation_set = select(&recordings, &split.validation);
    let test_set = select(&recordings, &split.test);
    drop(recordings);
    log::info!(
        "{} training, {} validation, {} test recordings",
        train_set.len(),
        validation_set.len(),
        test_set.len()
    );

    let (model, store, resume, transfer) = initialize(config, &request.start)?;
    let census = format_census(&store.census());
    let outcome = fit(config, &model, store, resume, &train_set, &validation_set, run_dir)?;
    let test = if test_set.is_empty() { None } else { Some(test_report(config, &model, &outcome.best, &test_set)?) };
    let summary = RunSummary {
        run_dir: run_dir.clone(),
        split,
        steps: outcome.steps,
        best_step: outcome.best_step,
        best_accuracy: outcome.best_accuracy,
        stop: outcome.stop.clone(),
        transfer,
        test,
    };
    write_text(&run_dir.join("report.txt"), &report_text(config, &summary, &census))?;
    write_json(&run_dir.join("report.json"), &summary)?;
    if let StopReason::Diverged { step } = outcome.stop {
        bail!("training diverged at step {step}; the last good parameters are in {}", run_dir.join(LAST_CHECKPOINT).display());
    }
    Ok(summary)
}
