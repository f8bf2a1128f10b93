//! Epoch encoder: learnable non-negative filterbank, bidirectional LSTM with
//! recurrent batch normalization, and attention pooling over frames.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::frontend::TimeFreqImage;
use crate::nn::{Blstm, Ctx, Mode, ParamBuilder};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::tape::{softplus, softplus_inverse, Var};

/// Filterbank weights before the softplus that makes them non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterbankParams {
    pub weights_unconstrained: Array2<f64>,
}

impl FilterbankParams {
    /// Builds parameters whose effective filterbank is `effective` (entries
    /// must be non-negative; exact zeros become a large negative weight).
    pub fn from_effective(effective: &Array2<f64>) -> Self {
        Self { weights_unconstrained: effective.mapv(softplus_inverse) }
    }

    /// `M` triangular filters with unit peaks linearly spaced from bin 0 to
    /// the last bin. Entries below `1e-3` are lifted to it so every weight
    /// keeps a gradient through the softplus.
    pub fn triangular(bins: usize, filters: usize) -> Self {
        let mut eff = Array2::zeros((bins, filters));
        let spacing = if filters > 1 { (bins - 1) as f64 / (filters - 1) as f64 } else { (bins - 1) as f64 };
        for m in 0..filters {
            let peak = m as f64 * spacing;
            for f in 0..bins {
                let d = (f as f64 - peak).abs() / spacing.max(1.0);
                eff[[f, m]] = (1.0 - d).max(0.0);
            }
        }
        eff.mapv_inplace(|v: f64| v.max(1e-3));
        Self::from_effective(&eff)
    }

    pub fn bins(&self) -> usize {
        self.weights_unconstrained.nrows()
    }

    pub fn filters(&self) -> usize {
        self.weights_unconstrained.ncols()
    }

    /// `softplus(W)`, element-wise non-negative.
    pub fn effective(&self) -> Array2<f64> {
        self.weights_unconstrained.mapv(softplus)
    }
}

/// `S * softplus(W)`: `[T, F]` to `[T, M]`.
pub fn apply_filterbank(image: &TimeFreqImage, fb: &FilterbankParams) -> Result<Array2<f64>> {
    if image.bins() != fb.bins() {
        return Err(Error::Shape(format!(
            "image has {} frequency bins, filterbank expects {}",
            image.bins(),
            fb.bins()
        )));
    }
    if fb.filters() >= fb.bins() {
        return Err(Error::Shape(format!("filter count {} must be below bin count {}", fb.filters(), fb.bins())));
    }
    Ok(image.values.dot(&fb.effective()))
}

/// Attention pooling weights: `u_t = tanh(x_t W + b)`, score `u_t . a`.
/// `w` is stored `[H_e, A]`, `b` as `[1, A]`, `context` as `[A, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
    pub context: Array2<f64>,
}

/// Attention-pooled epoch representation.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochEmbedding {
    pub values: Array1<f64>,
}

/// Pools `[T, H_e]` frame vectors into one embedding plus the weights used.
pub fn attention_pool(frames: &Array2<f64>, att: &AttentionParams) -> Result<(EpochEmbedding, Array1<f64>)> {
    let (steps, width) = frames.dim();
    if steps == 0 {
        return Err(Error::Shape("attention over zero frames".into()));
    }
    if att.w.nrows() != width || att.b.dim() != (1, att.w.ncols()) || att.context.dim() != (att.w.ncols(), 1) {
        return Err(Error::Shape(format!(
            "attention params {:?}/{:?}/{:?} do not fit frame width {width}",
            att.w.dim(),
            att.b.dim(),
            att.context.dim()
        )));
    }
    let u = (frames.dot(&att.w) + &att.b).mapv(f64::tanh);
    let scores = u.dot(&att.context).column(0).to_owned();
    let max = scores.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = scores.mapv(|s| (s - max).exp());
    let weights = &exp / exp.sum();
    let values = weights.dot(frames);
    Ok((EpochEmbedding { values }, weights))
}

/// Widths of the epoch encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub bins: usize,
    pub filters: usize,
    pub hidden: usize,
    pub attention: usize,
}

/// Parameter handles of the epoch encoder.
#[derive(Debug, Clone)]
pub struct EpochEncoder {
    pub dims: EncoderDims,
    pub filterbank: ParamId,
    pub blstm: Blstm,
    pub att_w: ParamId,
    pub att_b: ParamId,
    pub att_context: ParamId,
}

impl EpochEncoder {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, prefix: &str, dims: EncoderDims) -> Result<Self> {
        if dims.hidden % 2 != 0 {
            return Err(Error::Config(format!("epoch encoder width {} must be even", dims.hidden)));
        }
        if dims.filters == 0 || dims.filters >= dims.bins {
            return Err(Error::Config(format!("filter count {} must be in 1..{}", dims.filters, dims.bins)));
        }
        let fb = FilterbankParams::triangular(dims.bins, dims.filters);
        let filterbank = b.trainable(format!("{prefix}.filterbank"), fb.weights_unconstrained);
        let blstm = Blstm::new(b, &format!("{prefix}.blstm"), dims.filters, dims.hidden / 2);
        let w = fan_in_uniform(b.rng, dims.hidden, dims.attention, dims.hidden);
        let att_w = b.trainable(format!("{prefix}.attention.w"), w);
        let att_b = b.trainable(format!("{prefix}.attention.b"), Array2::zeros((1, dims.attention)));
        let ctx = fan_in_uniform(b.rng, dims.attention, 1, dims.attention);
        let att_context = b.trainable(format!("{prefix}.attention.context"), ctx);
        Ok(Self { dims, filterbank, blstm, att_w, att_b, att_context })
    }

    pub fn filterbank_params(&self, store: &ParamStore) -> FilterbankParams {
        FilterbankParams { weights_unconstrained: store.get(self.filterbank).clone() }
    }

    pub fn attention_params(&self, store: &ParamStore) -> AttentionParams {
        AttentionParams {
            w: store.get(self.att_w).clone(),
            b: store.get(self.att_b).clone(),
            context: store.get(self.att_context).clone(),
        }
    }

    /// Filterbank then BLSTM on time-major spectrogram rows `[T * N, F]`.
    pub fn frames(&self, ctx: &mut Ctx<'_>, images: Var, steps: usize, batch: usize) -> Result<Var> {
        let w = ctx.p(self.filterbank);
        let fb = ctx.tape.softplus(w);
        let filtered = ctx.tape.matmul(images, fb);
        self.blstm.run(ctx, filtered, steps, batch, "epoch encoder")
    }

    /// Attention pooling of time-major frame vectors. Returns the embeddings
    /// `[N, H_e]` and the weights `[T, N]`.
    pub fn pool(&self, ctx: &mut Ctx<'_>, frames: Var, steps: usize, batch: usize) -> (Var, Var) {
        let w = ctx.p(self.att_w);
        let b = ctx.p(self.att_b);
        let a = ctx.p(self.att_context);
        let proj = ctx.tape.matmul(frames, w);
        let proj = ctx.tape.add_row(proj, b);
        let u = ctx.tape.tanh(proj);
        let scores = ctx.tape.matmul(u, a);
        let scores = ctx.tape.reshape(scores, steps, batch);
        let weights = ctx.tape.softmax_cols(scores);
        let pooled = ctx.tape.weighted_time_sum(frames, weights);
        (pooled, weights)
    }

    /// Full encoder over time-major spectrogram rows.
    pub fn forward(&self, ctx: &mut Ctx<'_>, images: Var, steps: usize, batch: usize) -> Result<(Var, Var)> {
        let frames = self.frames(ctx, images, steps, batch)?;
        Ok(self.pool(ctx, frames, steps, batch))
    }

    /// Runs the BLSTM part on one epoch's filtered frames `[T, M]`.
    pub fn encode_epoch_frames(&self, store: &ParamStore, frames: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
        if frames.nrows() == 0 {
            return Err(Error::Shape("epoch with zero frames".into()));
        }
        if frames.ncols() != self.dims.filters {
            return Err(Error::Shape(format!("expected {} filter outputs, got {}", self.dims.filters, frames.ncols())));
        }
        let mut ctx = Ctx::new(store, mode);
        let x = ctx.tape.input(frames.clone());
        let out = self.blstm.run(&mut ctx, x, frames.nrows(), 1, "epoch encoder")?;
        Ok(ctx.tape.value(out).clone())
    }
}

/// Arranges `N` images of `[T, F]` time-major: row `t * N + n`.
pub fn time_major_images(images: &[&Array2<f64>]) -> Array2<f64> {
    let batch = images.len();
    let (steps, bins) = images.first().map(|i| i.dim()).unwrap_or((0, 0));
    let mut out = Array2::zeros((steps * batch, bins));
    for (n, img) in images.iter().enumerate() {
        for t in 0..steps {
            out.row_mut(t * batch + n).assign(&img.row(t));
        }
    }
    out
}
