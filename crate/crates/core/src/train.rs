//! Sequence sampling, the optimization loop with validation-based early
//! stopping, and initialization from a pretrained parameter set.

use std::ops::Range;
use std::sync::mpsc::{sync_channel, Receiver};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_recordings, TrainedModel};
use crate::formats::FeatureRecording;
use crate::model::{Model, SequenceBatch};
use crate::nn::Mode;
use crate::optim::{Adam, AdamConfig, AdamState};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub minibatch_size: usize,
    pub max_train_epochs: usize,
    /// Optimizer steps between validations.
    pub validate_every: u64,
    /// Validations without improvement before stopping.
    pub patience: usize,
    /// Stop on patience; when false, run until the step or epoch budget.
    pub early_stopping: bool,
    /// Hard step budget; 0 means unlimited.
    pub max_steps: u64,
    /// Sequences per forward pass during validation.
    pub eval_batch_size: usize,
    /// Data-loading threads; 1 builds batches on the training thread.
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            clip_norm: 5.0,
            minibatch_size: 8,
            max_train_epochs: 10,
            validate_every: 100,
            patience: 50,
            early_stopping: true,
            max_steps: 0,
            eval_batch_size: 8,
            workers: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("Adam betas must lie in (0, 1)".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config(format!("train.clip_norm must be non-negative, got {}", self.clip_norm)));
        }
        let counts = [
            ("minibatch_size", self.minibatch_size),
            ("max_train_epochs", self.max_train_epochs),
            ("validate_every", self.validate_every as usize),
            ("patience", self.patience),
            ("eval_batch_size", self.eval_batch_size),
            ("workers", self.workers),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }
}

/// Start of one training sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SequenceIndex {
    pub recording: usize,
    pub start: usize,
}

/// Start positions of every window of `seq_len` epochs with a shift of one.
pub fn sample_sequences(len: usize, seq_len: usize) -> Range<usize> {
    if len < seq_len {
        return 0..0;
    }
    0..len - seq_len + 1
}

/// All training windows over a set of recordings; recordings shorter than
/// `seq_len` are skipped with a warning.
pub fn sequence_pool(recordings: &[FeatureRecording], seq_len: usize) -> Vec<SequenceIndex> {
    let mut pool = Vec::new();
    for (recording, rec) in recordings.iter().enumerate() {
        let starts = sample_sequences(rec.len(), seq_len);
        if starts.is_empty() {
            log::warn!("skipping {}: {} epochs, shorter than L={seq_len}", rec.recording_id, rec.len());
        }
        pool.extend(starts.map(|start| SequenceIndex { recording, start }));
    }
    pool
}

/// Shuffles the window pool once per training epoch.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    pool: Vec<SequenceIndex>,
    minibatch: usize,
    seed: u64,
}

impl EpochSampler {
    pub fn new(pool: Vec<SequenceIndex>, minibatch: usize, seed: u64) -> Self {
        Self { pool, minibatch: minibatch.max(1), seed }
    }

    pub fn len(&self) -> usize {
        self.pool.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }

    /// Minibatches of one epoch; the final one may be short.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<SequenceIndex>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut order = self.pool.clone();
        order.shuffle(&mut rng);
        order.chunks(self.minibatch).map(<[_]>::to_vec).collect()
    }

    /// Batches of every epoch in order, `max_epochs` epochs long.
    pub fn iter(&self, max_epochs: usize) -> impl Iterator<Item = (usize, Vec<SequenceIndex>)> + '_ {
        (0..max_epochs).flat_map(move |e| self.epoch(e).into_iter().map(move |b| (e, b)))
    }
}

/// Gathers the windows of `indices` into a batch.
pub fn make_batch(recordings: &[FeatureRecording], indices: &[SequenceIndex], seq_len: usize) -> Result<SequenceBatch> {
    let mut labels = Vec::with_capacity(indices.len() * seq_len);
    let mut mask = Vec::with_capacity(indices.len() * seq_len);
    for ix in indices {
        let hyp = &recordings[ix.recording].hypnogram;
        for e in ix.start..ix.start + seq_len {
            labels.push(hyp.stages[e].index());
            mask.push(hyp.valid_mask[e]);
        }
    }
    let images = indices
        .iter()
        .flat_map(|ix| (ix.start..ix.start + seq_len).map(move |e| recordings[ix.recording].image(e)));
    SequenceBatch::from_images(indices.len(), seq_len, images, labels, mask)
}

/// Tracks the best validation accuracy and counts checks without
/// improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience: patience.max(1), best: None, since_best: 0 }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, accuracy: f64) -> Observation {
        let improved = self.best.map_or(true, |b| accuracy > b);
        if improved {
            self.best = Some(accuracy);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        Observation { improved, stop: self.since_best >= self.patience }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub train_loss: f64,
    pub validation_accuracy: f64,
    pub seconds_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    MaxSteps,
    /// Loss or gradients became non-finite at this step; nothing from it was
    /// applied.
    Diverged { step: u64 },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ParamStore,
    pub best_accuracy: f64,
    pub best_step: u64,
    pub last: ParamStore,
    pub optimizer: AdamState,
    pub steps: u64,
    pub history: Vec<ValidationRecord>,
    pub stop: StopReason,
}

/// Seeded generator for the dropout masks of one step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d209);
    rng.set_stream(step);
    rng
}

/// One optimizer step. Returns the loss, or `None` when the loss or gradient
/// is non-finite (parameters are left untouched).
pub fn train_step(model: &Model, store: &mut ParamStore, adam: &mut Adam, batch: &SequenceBatch, rng: ChaCha8Rng) -> Result<Option<f64>> {
    let (loss, grads, updates) = match model.loss_and_grads(store, batch, Mode::Train, Some(rng)) {
        Ok(r) => r,
        Err(Error::NonFiniteLogits { .. } | Error::NonFiniteActivation { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Ok(None);
    }
    adam.step(store, &grads)?;
    updates.apply(store);
    Ok(Some(loss))
}

/// Overall accuracy over valid epochs of the validation recordings, scored
/// with disjoint windows.
pub fn validation_accuracy(model: &Model, store: &ParamStore, recordings: &[FeatureRecording], cfg: &TrainConfig) -> Result<f64> {
    let scorer = TrainedModel { model, params: store };
    let (_, cm) = evaluate_recordings(&scorer, recordings, model.config.seq_len, cfg.eval_batch_size, 1)?;
    if cm.total() == 0 {
        return Err(Error::Evaluation("validation set has no scorable epochs".into()));
    }
    Ok(cm.accuracy())
}

/// Batches produced ahead of the training thread by `workers` threads, each
/// building every `workers`-th batch. Consumption order is the sampler order.
fn spawn_loaders<'s, 'e: 's>(
    scope: &'s std::thread::Scope<'s, 'e>,
    recordings: &'e [FeatureRecording],
    plan: &'e [(usize, Vec<SequenceIndex>)],
    seq_len: usize,
    workers: usize,
) -> Vec<Receiver<Result<SequenceBatch>>> {
    (0..workers)
        .map(|w| {
            let (tx, rx) = sync_channel(2);
            scope.spawn(move || {
                for (_, indices) in plan.iter().skip(w).step_by(workers) {
                    if tx.send(make_batch(recordings, indices, seq_len)).is_err() {
                        break;
                    }
                }
            });
            rx
        })
        .collect()
}

/// Trains with Adam on shuffled minibatches, validating every
/// `validate_every` steps and keeping the best parameters. `resume` continues
/// the optimizer state of an earlier run. `on_validation` sees each record,
/// the current parameters and whether they are the new best.
pub fn train<F>(
    model: &Model,
    mut store: ParamStore,
    resume: Option<AdamState>,
    train_set: &[FeatureRecording],
    validation_set: &[FeatureRecording],
    cfg: &TrainConfig,
    mut on_validation: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&ValidationRecord, &ParamStore, bool) -> Result<()>,
{
    cfg.validate()?;
    if validation_set.is_empty() {
        return Err(Error::Config("training needs at least one validation recording".into()));
    }
    let seq_len = model.config.seq_len;
    let sampler = EpochSampler::new(sequence_pool(train_set, seq_len), cfg.minibatch_size, cfg.seed);
    if sampler.is_empty() {
        return Err(Error::Config(format!("no training recording holds L={seq_len} epochs")));
    }
    let mut adam = Adam::new(cfg.adam(), &store);
    if let Some(state) = resume {
        state.validate(&store)?;
        adam.state = state;
    }
    let start_step = adam.state.step;
    let batches_per_epoch = sampler.len().div_ceil(cfg.minibatch_size) as u64;
    let skip = start_step.min(batches_per_epoch * cfg.max_train_epochs as u64) as usize;
    let plan: Vec<(usize, Vec<SequenceIndex>)> = sampler.iter(cfg.max_train_epochs).skip(skip).collect();
    let budget = if cfg.max_steps == 0 { usize::MAX } else { cfg.max_steps.saturating_sub(start_step) as usize };
    let plan = &plan[..plan.len().min(budget)];

    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = store.clone();
    let mut best_step = start_step;
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut stop = if plan.len() == budget { StopReason::MaxSteps } else { StopReason::MaxEpochs };
    let mut window_start = Instant::now();
    let mut window_steps = 0u64;

    std::thread::scope(|scope| -> Result<()> {
        let workers = cfg.workers.max(1);
        let loaders = (workers > 1).then(|| spawn_loaders(scope, train_set, plan, seq_len, workers));
        for (i, (_, indices)) in plan.iter().enumerate() {
            let batch = match &loaders {
                Some(rx) => rx[i % workers].recv().map_err(|_| Error::Config("data loader stopped".into()))??,
                None => make_batch(train_set, indices, seq_len)?,
            };
            let step = adam.state.step;
            match train_step(model, &mut store, &mut adam, &batch, step_rng(cfg.seed, step))? {
                Some(loss) => {
                    loss_sum += loss;
                    loss_count += 1;
                }
                None => {
                    log::error!("non-finite loss at step {}; keeping the last good parameters", step + 1);
                    stop = StopReason::Diverged { step: step + 1 };
                    break;
                }
            }
            window_steps += 1;
            let step = adam.state.step;
            let last = i + 1 == plan.len();
            if step % cfg.validate_every == 0 || last {
                let accuracy = validation_accuracy(model, &store, validation_set, cfg)?;
                let record = ValidationRecord {
                    step,
                    train_loss: loss_sum / loss_count.max(1) as f64,
                    validation_accuracy: accuracy,
                    seconds_per_step: window_start.elapsed().as_secs_f64() / window_steps.max(1) as f64,
                };
                loss_sum = 0.0;
                loss_count = 0;
                let obs = stopper.observe(accuracy);
                if obs.improved {
                    best = store.clone();
                    best_step = step;
                    best_accuracy = accuracy;
                }
                log::info!(
                    "step {step}: loss {:.4}, validation accuracy {accuracy:.4}{}",
                    record.train_loss,
                    if obs.improved { " (best)" } else { "" }
                );
                on_validation(&record, &store, obs.improved)?;
                history.push(record);
                window_start = Instant::now();
                window_steps = 0;
                if cfg.early_stopping && obs.stop {
                    stop = StopReason::Patience;
                    break;
                }
            }
        }
        Ok(())
    })?;

    if best_accuracy == f64::NEG_INFINITY {
        // diverged before the first validation
        best_accuracy = validation_accuracy(model, &best, validation_set, cfg).unwrap_or(0.0);
    }
    Ok(TrainOutcome {
        best,
        best_accuracy,
        best_step,
        last: store,
        steps: adam.state.step,
        optimizer: adam.state,
        history,
        stop,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Every tensor must be present with the same shape.
    All,
    /// Copy tensors whose name and shape match; keep the rest fresh.
    Compatible,
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(InitMode::All),
            "compatible" => Ok(InitMode::Compatible),
            other => Err(Error::Config(format!("unknown init mode {other:?} (expected all or compatible)"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub copied: Vec<String>,
    /// Tensors left at their fresh initialization.
    pub fresh: Vec<String>,
    /// Pretrained tensors with no counterpart in the model.
    pub unused: Vec<String>,
}

/// Copies pretrained tensors into a freshly initialized store. In `All` mode
/// any missing or mis-shaped tensor is an error and nothing is copied.
pub fn init_from_pretrained(store: &mut ParamStore, pretrained: &ParamStore, mode: InitMode) -> Result<TransferReport> {
    let mut report = TransferReport::default();
    let mut copies = Vec::new();
    let mut mismatches = Vec::new();
    for id in store.ids() {
        let entry = store.entry(id);
        match pretrained.by_name(&entry.name) {
            Some(v) if v.dim() == entry.value.dim() && pretrained.entry(pretrained.id(&entry.name).expect("present")).kind == entry.kind => {
                copies.push((id, v.clone()));
                report.copied.push(entry.name.clone());
            }
            Some(v) => {
                mismatches.push(format!("{}: model {:?}, pretrained {:?}", entry.name, entry.value.dim(), v.dim()));
                report.fresh.push(entry.name.clone());
            }
            None => {
                mismatches.push(format!("{}: absent from pretrained parameters", entry.name));
                report.fresh.push(entry.name.clone());
            }
        }
    }
    report.unused = pretrained.entries().iter().filter(|e| store.id(&e.name).is_none()).map(|e| e.name.clone()).collect();
    if mode == InitMode::All && (!mismatches.is_empty() || !report.unused.is_empty()) {
        mismatches.extend(report.unused.iter().map(|n| format!("{n}: absent from model")));
        return Err(Error::Incompatible(mismatches.join("; ")));
    }
    for (id, v) in copies {
        store.set(id, v)?;
    }
    Ok(report)
}
