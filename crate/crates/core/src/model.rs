//! The full staging network: epoch encoder, long-context module (folded or
//! flat), and a classifier head shared across time positions.

use std::rc::Rc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderDims, EpochEncoder};
use crate::error::{Error, Result};
use crate::frontend::{FRAMES_PER_EPOCH, FREQ_BINS, NUM_CLASSES};
use crate::long_context::{FoldSpec, LongContext};
use crate::nn::{BnUpdates, Ctx, Dense, Mode, ParamBuilder};
use crate::params::{ParamId, ParamStore};
use crate::tape::{softmax_rows, Var};

/// Floor applied inside the log of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Folded,
    Flat,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Folded => "folded",
            Variant::Flat => "flat",
        })
    }
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Sequence length `L` in epochs.
    pub seq_len: usize,
    /// Number of subsequences `B` (folded only).
    pub fold_b: usize,
    /// Subsequence length `K` (folded only).
    pub fold_k: usize,
    pub frames: usize,
    pub bins: usize,
    pub filters: usize,
    pub attention: usize,
    pub hidden_epoch: usize,
    pub hidden_ss: usize,
    pub hidden_ws: usize,
    pub fc_units: usize,
    pub classes: usize,
    pub dropout: f64,
    /// Apply dropout to the long-context recurrent outputs as well.
    pub long_context_dropout: bool,
    pub l2: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Folded,
            seq_len: 200,
            fold_b: 10,
            fold_k: 20,
            frames: FRAMES_PER_EPOCH,
            bins: FREQ_BINS,
            filters: 32,
            attention: 64,
            hidden_epoch: 128,
            hidden_ss: 128,
            hidden_ws: 128,
            fc_units: 512,
            classes: NUM_CLASSES,
            dropout: 0.1,
            long_context_dropout: true,
            l2: 1e-4,
        }
    }
}

impl ModelConfig {
    /// The flat baseline of the same widths at sequence length `seq_len`.
    pub fn flat(seq_len: usize) -> Self {
        Self { variant: Variant::Flat, seq_len, fold_b: 1, fold_k: seq_len, ..Self::default() }
    }

    /// Fold spec actually used: `(1, L)` for the flat variant.
    pub fn fold_spec(&self) -> Result<FoldSpec> {
        match self.variant {
            Variant::Folded => FoldSpec::new(self.seq_len, self.fold_b, self.fold_k),
            Variant::Flat => Ok(FoldSpec::flat(self.seq_len)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes != NUM_CLASSES {
            return Err(Error::Config(format!("class count must be {NUM_CLASSES}, got {}", self.classes)));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config(format!("l2 coefficient must be non-negative, got {}", self.l2)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        if self.seq_len == 0 || self.frames == 0 {
            return Err(Error::Config("sequence length and frame count must be positive".into()));
        }
        for (name, w) in [("hidden_epoch", self.hidden_epoch), ("hidden_ss", self.hidden_ss), ("hidden_ws", self.hidden_ws)] {
            if w == 0 || w % 2 != 0 {
                return Err(Error::Config(format!("{name} must be a positive even width, got {w}")));
            }
        }
        if self.attention == 0 || self.fc_units == 0 {
            return Err(Error::Config("attention size and fc width must be positive".into()));
        }
        self.fold_spec().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Sequential recurrent steps per sample in the long-context module.
    pub fn sequential_steps(&self) -> usize {
        match self.variant {
            Variant::Folded => self.fold_b + self.fold_k,
            Variant::Flat => self.seq_len,
        }
    }
}

/// A minibatch of `sequences` sequences of `seq_len` epochs. Images are laid
/// out time-major over frames: row `t * (S*L) + s*L + ell`.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub sequences: usize,
    pub seq_len: usize,
    pub frames: usize,
    pub images: Array2<f64>,
    /// Class index per epoch, sample-major.
    pub labels: Vec<usize>,
    /// Scoring weight per epoch (1 valid, 0 masked), sample-major.
    pub mask: Vec<f64>,
}

impl SequenceBatch {
    /// Builds a batch from per-epoch images (`[T, F]`, sample-major order).
    pub fn from_images<'a, I>(sequences: usize, seq_len: usize, images: I, labels: Vec<usize>, mask: Vec<bool>) -> Result<Self>
    where
        I: IntoIterator<Item = ndarray::ArrayView2<'a, f32>>,
    {
        let n = sequences * seq_len;
        if labels.len() != n || mask.len() != n {
            return Err(Error::Shape(format!("expected {n} labels and mask entries")));
        }
        let mut out: Option<Array2<f64>> = None;
        let mut frames = 0;
        let mut count = 0;
        for (idx, img) in images.into_iter().enumerate() {
            let (t, f) = img.dim();
            let buf = out.get_or_insert_with(|| {
                frames = t;
                Array2::zeros((t * n, f))
            });
            if t != frames || f != buf.ncols() {
                return Err(Error::Shape(format!("epoch {idx} image is {t}x{f}")));
            }
            for ti in 0..t {
                let mut row = buf.row_mut(ti * n + idx);
                for (dst, &src) in row.iter_mut().zip(img.row(ti).iter()) {
                    *dst = src as f64;
                }
            }
            count += 1;
        }
        if count != n {
            return Err(Error::Shape(format!("expected {n} epoch images, got {count}")));
        }
        let mask = mask.into_iter().map(|m| if m { 1.0 } else { 0.0 }).collect();
        Ok(Self { sequences, seq_len, frames, images: out.expect("non-empty batch"), labels, mask })
    }

    pub fn epochs(&self) -> usize {
        self.sequences * self.seq_len
    }
}

/// Per-epoch class posteriors of one sequence, `[L, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSequence {
    pub probabilities: Array2<f64>,
}

/// Parameter handles of the complete network.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EpochEncoder,
    pub long: LongContext,
    pub fc1: Dense,
    pub fc2: Dense,
    pub output: Dense,
}

/// Result of a forward pass on the tape.
pub struct Forward<'a> {
    pub ctx: Ctx<'a>,
    pub logits: Var,
    pub attention: Var,
}

impl Model {
    /// Creates the network and freshly initialized parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder { store: &mut store, rng: &mut rng };
        let dims = EncoderDims {
            bins: config.bins,
            filters: config.filters,
            hidden: config.hidden_epoch,
            attention: config.attention,
        };
        let encoder = EpochEncoder::new(&mut b, "encoder", dims)?;
        let inter = match config.variant {
            Variant::Folded => Some(config.hidden_ws),
            Variant::Flat => None,
        };
        let long = LongContext::new(&mut b, "long", config.hidden_epoch, config.hidden_ss, inter)?;
        let width = long.output_width();
        let fc1 = Dense::new(&mut b, "head.fc1", width, config.fc_units);
        let fc2 = Dense::new(&mut b, "head.fc2", config.fc_units, config.fc_units);
        let output = Dense::new(&mut b, "head.out", config.fc_units, config.classes);
        let model = Self { config: config.clone(), encoder, long, fc1, fc2, output };
        Ok((model, store))
    }

    /// Logits `[S*L, C]` (sample-major) for a batch.
    pub fn forward<'a>(&self, store: &'a ParamStore, batch: &SequenceBatch, mode: Mode, rng: Option<ChaCha8Rng>) -> Result<Forward<'a>> {
        if batch.seq_len != self.config.seq_len {
            return Err(Error::Shape(format!("batch has L={}, model expects L={}", batch.seq_len, self.config.seq_len)));
        }
        if batch.frames != self.config.frames || batch.images.ncols() != self.config.bins {
            return Err(Error::Shape(format!(
                "batch images are {}x{}, model expects {}x{}",
                batch.frames,
                batch.images.ncols(),
                self.config.frames,
                self.config.bins
            )));
        }
        let mut ctx = Ctx::new(store, mode);
        if let (Mode::Train, Some(rng)) = (mode, rng) {
            ctx = ctx.with_dropout(self.config.dropout, rng);
        }
        let images = ctx.tape.input(batch.images.clone());
        let (embeddings, attention) = self.encoder.forward(&mut ctx, images, batch.frames, batch.epochs())?;
        let spec = self.config.fold_spec()?;
        let saved = if self.config.long_context_dropout { None } else { Some(ctx.set_dropout_rate(0.0)) };
        let sequence = self.long.forward(&mut ctx, embeddings, spec, batch.sequences);
        if let Some(rate) = saved {
            ctx.set_dropout_rate(rate);
        }
        let sequence = sequence?;
        let h = self.fc1.forward(&mut ctx, sequence);
        let h = ctx.tape.relu(h);
        let h = ctx.dropout(h);
        let h = self.fc2.forward(&mut ctx, h);
        let h = ctx.tape.relu(h);
        let h = ctx.dropout(h);
        let logits = self.output.forward(&mut ctx, h);
        for (row, r) in ctx.tape.value(logits).rows().into_iter().enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLogits { item: row / batch.seq_len, position: row % batch.seq_len });
            }
        }
        Ok(Forward { ctx, logits, attention })
    }

    /// Posteriors per sequence.
    pub fn predict(&self, store: &ParamStore, batch: &SequenceBatch) -> Result<Vec<PredictionSequence>> {
        let fwd = self.forward(store, batch, Mode::Eval, None)?;
        let probs = softmax_rows(fwd.ctx.tape.value(fwd.logits));
        Ok((0..batch.sequences)
            .map(|s| PredictionSequence {
                probabilities: probs.slice(ndarray::s![s * batch.seq_len..(s + 1) * batch.seq_len, ..]).to_owned(),
            })
            .collect())
    }

    /// Adds the masked cross-entropy and the L2 penalty over every trainable
    /// tensor to the tape; returns the loss node.
    pub fn loss_on_tape(&self, fwd: &mut Forward<'_>, batch: &SequenceBatch) -> Var {
        let targets: Rc<[usize]> = batch.labels.clone().into();
        let weights: Rc<[f64]> = batch.mask.clone().into();
        let ctx = &mut fwd.ctx;
        let ce = ctx.tape.cross_entropy(fwd.logits, targets, weights, PROB_FLOOR);
        if self.config.l2 == 0.0 {
            return ce;
        }
        let ids: Vec<ParamId> = ctx.params.trainable_ids().collect();
        let mut total = ce;
        let mut reg: Option<Var> = None;
        for id in ids {
            let p = ctx.p(id);
            let sq = ctx.tape.sum_squares(p);
            reg = Some(match reg {
                None => sq,
                Some(acc) => ctx.tape.add(acc, sq),
            });
        }
        if let Some(reg) = reg {
            let scaled = ctx.tape.scale(reg, self.config.l2);
            total = ctx.tape.add(ce, scaled);
        }
        total
    }

    /// Loss, gradients for every tensor of the store (zeros for buffers and
    /// unused tensors), and the batch statistics of the pass.
    pub fn loss_and_grads(
        &self,
        store: &ParamStore,
        batch: &SequenceBatch,
        mode: Mode,
        rng: Option<ChaCha8Rng>,
    ) -> Result<(f64, Vec<Array2<f64>>, BnUpdates)> {
        let mut fwd = self.forward(store, batch, mode, rng)?;
        let loss = self.loss_on_tape(&mut fwd, batch);
        let value = fwd.ctx.tape.scalar(loss);
        let grads = fwd.ctx.tape.backward(loss);
        let mut out: Vec<Array2<f64>> = store.entries().iter().map(|e| Array2::zeros(e.value.dim())).collect();
        for (id, g) in fwd.ctx.tape.param_grads(&grads) {
            out[id.index()] += g;
        }
        let updates = fwd.ctx.take_bn_updates();
        Ok((value, out, updates))
    }

    /// Loss of a batch without gradients.
    pub fn loss_value(&self, store: &ParamStore, batch: &SequenceBatch, mode: Mode) -> Result<f64> {
        let mut fwd = self.forward(store, batch, mode, None)?;
        let loss = self.loss_on_tape(&mut fwd, batch);
        Ok(fwd.ctx.tape.scalar(loss))
    }

    /// Sequential steps recorded by a forward pass on one sample.
    pub fn measured_sequential_steps(&self, store: &ParamStore, batch: &SequenceBatch) -> Result<usize> {
        let fwd = self.forward(store, batch, Mode::Eval, None)?;
        Ok(fwd.ctx.seq_steps)
    }
}

/// The flat baseline: same encoder and head, one recurrent pass over all L
/// epochs with no inter-subsequence stage.
pub fn build_flat_baseline(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
    if config.variant != Variant::Flat {
        return Err(Error::Config("flat baseline requires variant = flat".into()));
    }
    Model::build(config, seed)
}

/// Masked cross-entropy of posteriors against class labels, plus
/// `l2 * l2_norm_sq`. Probabilities are floored at [`PROB_FLOOR`] inside the
/// log. Sequences with no valid epoch contribute nothing.
pub fn loss(predictions: &[PredictionSequence], labels: &[Vec<usize>], masks: &[Vec<bool>], l2: f64, l2_norm_sq: f64) -> Result<f64> {
    if predictions.len() != labels.len() || labels.len() != masks.len() {
        return Err(Error::Shape("predictions, labels and masks differ in count".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((p, y), m) in predictions.iter().zip(labels).zip(masks) {
        if p.probabilities.nrows() != y.len() || y.len() != m.len() {
            return Err(Error::Shape("sequence length mismatch".into()));
        }
        for (ell, (&label, &valid)) in y.iter().zip(m).enumerate() {
            if valid {
                total -= p.probabilities[[ell, label]].max(PROB_FLOOR).ln();
                count += 1;
            }
        }
    }
    let ce = if count > 0 { total / count as f64 } else { 0.0 };
    Ok(ce + l2 * l2_norm_sq)
}

/// Analytic vs central-difference gradient of one tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheck {
    pub name: String,
    /// `|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)` in the L2 norm.
    pub relative_error: f64,
    pub analytic_norm: f64,
}

/// Compares tape gradients of the loss against central finite differences
/// for every trainable tensor, in eval mode (fixed batch-norm statistics, no
/// dropout).
pub fn gradient_check(model: &Model, store: &ParamStore, batch: &SequenceBatch, step: f64) -> Result<Vec<GradientCheck>> {
    let (_, grads, _) = model.loss_and_grads(store, batch, Mode::Eval, None)?;
    let mut probe = store.clone();
    let mut out = Vec::new();
    for id in store.trainable_ids() {
        let analytic = &grads[id.index()];
        let mut numeric = Array2::<f64>::zeros(analytic.dim());
        for idx in 0..analytic.len() {
            let (r, c) = (idx / analytic.ncols(), idx % analytic.ncols());
            let original = probe.get(id)[[r, c]];
            probe.get_mut(id)[[r, c]] = original + step;
            let plus = model.loss_value(&probe, batch, Mode::Eval)?;
            probe.get_mut(id)[[r, c]] = original - step;
            let minus = model.loss_value(&probe, batch, Mode::Eval)?;
            probe.get_mut(id)[[r, c]] = original;
            numeric[[r, c]] = (plus - minus) / (2.0 * step);
        }
        let diff = (analytic - &numeric).mapv(|v| v * v).sum().sqrt();
        let na = analytic.mapv(|v| v * v).sum().sqrt();
        let nn = numeric.mapv(|v| v * v).sum().sqrt();
        let scale = na.max(nn);
        out.push(GradientCheck {
            name: store.entry(id).name.clone(),
            relative_error: if scale > 0.0 { diff / scale } else { 0.0 },
            analytic_norm: na,
        });
    }
    Ok(out)
}

impl ModelConfig {
    /// A very small folded model for numerical checks: L=8 as 2×4, four
    /// frames of nine bins, three filters and widths of eight.
    pub fn miniature() -> Self {
        Self {
            variant: Variant::Folded,
            seq_len: 8,
            fold_b: 2,
            fold_k: 4,
            frames: 4,
            bins: 9,
            filters: 3,
            attention: 8,
            hidden_epoch: 8,
            hidden_ss: 8,
            hidden_ws: 8,
            fc_units: 8,
            ..Self::default()
        }
    }
}
