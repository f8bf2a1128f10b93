//! Layers built on the tape: dense, residual projection with layer norm, and
//! an LSTM with recurrent batch normalization.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, ParamId, ParamKind, ParamStore};
use crate::tape::{BatchStats, Tape, Var};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Initial scale of every recurrent batch-norm layer.
pub const BN_GAMMA_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// State of one forward pass: the tape, the parameters it reads, dropout
/// randomness and batch-norm statistics to fold into the running buffers.
pub struct Ctx<'a> {
    pub tape: Tape,
    pub params: &'a ParamStore,
    pub mode: Mode,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
    param_vars: HashMap<ParamId, Var>,
    bn_updates: Vec<(ParamId, ParamId, BatchStats)>,
    /// Sequential recurrent steps taken by the long-context stage.
    pub seq_steps: usize,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            params,
            mode,
            dropout: 0.0,
            rng: None,
            param_vars: HashMap::new(),
            bn_updates: Vec::new(),
            seq_steps: 0,
        }
    }

    /// Enables dropout at `rate` (train mode only).
    pub fn with_dropout(mut self, rate: f64, rng: ChaCha8Rng) -> Self {
        self.dropout = rate;
        self.rng = Some(rng);
        self
    }

    /// Current dropout rate; returns the previous one.
    pub fn set_dropout_rate(&mut self, rate: f64) -> f64 {
        std::mem::replace(&mut self.dropout, rate)
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Tape node for a parameter; created once per pass.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.tape.param(id, self.params.get(id).clone());
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(&id).copied()
    }

    /// Inverted dropout; identity in eval mode or at rate zero.
    pub fn dropout(&mut self, x: Var) -> Var {
        if self.mode != Mode::Train || self.dropout <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.dropout;
        let (rows, cols) = self.tape.shape(x);
        let rng = self.rng.as_mut().expect("dropout rng");
        let mask = Array2::from_shape_fn((rows, cols), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.tape.dropout(x, mask)
    }

    /// Batch norm without affine part: batch statistics over each block of
    /// `group` rows in train mode, running buffers in eval mode.
    pub fn batch_norm(&mut self, x: Var, group: usize, mean: ParamId, var: ParamId) -> Var {
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, group, BN_EPS);
                self.bn_updates.push((mean, var, stats));
                y
            }
            Mode::Eval => {
                let (m, v) = (self.params.get(mean), self.params.get(var));
                self.tape.batch_norm_fixed(x, m, v, BN_EPS)
            }
        }
    }

    /// Batch statistics recorded during this pass.
    pub fn take_bn_updates(&mut self) -> BnUpdates {
        BnUpdates(std::mem::take(&mut self.bn_updates))
    }
}

/// Batch statistics to fold into running buffers after a train-mode pass.
pub struct BnUpdates(Vec<(ParamId, ParamId, BatchStats)>);

impl BnUpdates {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Statistics recorded several times for the same buffer (one per time
    /// step) are pooled into a single momentum update.
    pub fn apply(self, store: &mut ParamStore) {
        let mut pooled: Vec<(ParamId, ParamId, Array2<f64>, Array2<f64>, usize)> = Vec::new();
        for (mean_id, var_id, stats) in self.0 {
            match pooled.iter_mut().find(|p| p.0 == mean_id) {
                Some(p) => {
                    p.2 += &stats.mean;
                    p.3 += &stats.var;
                    p.4 += 1;
                }
                None => pooled.push((mean_id, var_id, stats.mean, stats.var, 1)),
            }
        }
        for (mean_id, var_id, mean, var, count) in pooled {
            let n = count as f64;
            let running_mean = store.get_mut(mean_id);
            *running_mean = &*running_mean * (1.0 - BN_MOMENTUM) + &(mean / n) * BN_MOMENTUM;
            let running_var = store.get_mut(var_id);
            *running_var = &*running_var * (1.0 - BN_MOMENTUM) + &(var / n) * BN_MOMENTUM;
        }
    }
}

/// Registers parameters under a common name prefix.
pub struct ParamBuilder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> ParamBuilder<'_, R> {
    pub fn trainable(&mut self, name: String, value: Array2<f64>) -> ParamId {
        self.store.insert(name, ParamKind::Trainable, value)
    }

    pub fn buffer(&mut self, name: String, value: Array2<f64>) -> ParamId {
        self.store.insert(name, ParamKind::Buffer, value)
    }
}

/// `x W + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, prefix: &str, inputs: usize, outputs: usize) -> Self {
        let w = fan_in_uniform(b.rng, inputs, outputs, inputs);
        let weight = b.trainable(format!("{prefix}.weight"), w);
        let bias = b.trainable(format!("{prefix}.bias"), Array2::zeros((1, outputs)));
        Self { weight, bias, inputs, outputs }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Var {
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        let xw = ctx.tape.matmul(x, w);
        ctx.tape.add_row(xw, b)
    }
}

/// `x + LN(x W + b)` with a learned layer-norm gain and bias.
#[derive(Debug, Clone)]
pub struct ResidualProjection {
    pub proj: Dense,
    pub gain: ParamId,
    pub shift: ParamId,
}

impl ResidualProjection {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, prefix: &str, width: usize) -> Self {
        let proj = Dense::new(b, &format!("{prefix}.proj"), width, width);
        let gain = b.trainable(format!("{prefix}.ln_gain"), Array2::ones((1, width)));
        let shift = b.trainable(format!("{prefix}.ln_bias"), Array2::zeros((1, width)));
        Self { proj, gain, shift }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Var {
        let z = self.proj.forward(ctx, x);
        let n = ctx.tape.layer_norm(z, LN_EPS);
        let g = ctx.p(self.gain);
        let s = ctx.p(self.shift);
        let scaled = ctx.tape.mul_row(n, g);
        let shifted = ctx.tape.add_row(scaled, s);
        ctx.tape.add(x, shifted)
    }
}

/// One direction of an LSTM whose input-to-hidden and hidden-to-hidden gate
/// pre-activations and cell output are batch normalized. Gate column order is
/// input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct BnLstm {
    pub hidden: usize,
    pub inputs: usize,
    w_x: ParamId,
    w_h: ParamId,
    bias: ParamId,
    gamma_x: ParamId,
    gamma_h: ParamId,
    gamma_c: ParamId,
    beta_c: ParamId,
    mean_x: ParamId,
    var_x: ParamId,
    mean_h: ParamId,
    var_h: ParamId,
    mean_c: ParamId,
    var_c: ParamId,
}

impl BnLstm {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, prefix: &str, inputs: usize, hidden: usize) -> Self {
        let gates = 4 * hidden;
        let w_x = fan_in_uniform(b.rng, inputs, gates, inputs);
        let w_h = fan_in_uniform(b.rng, hidden, gates, hidden);
        let mut bias = Array2::zeros((1, gates));
        bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        Self {
            hidden,
            inputs,
            w_x: b.trainable(format!("{prefix}.w_x"), w_x),
            w_h: b.trainable(format!("{prefix}.w_h"), w_h),
            bias: b.trainable(format!("{prefix}.bias"), bias),
            gamma_x: b.trainable(format!("{prefix}.gamma_x"), Array2::from_elem((1, gates), BN_GAMMA_INIT)),
            gamma_h: b.trainable(format!("{prefix}.gamma_h"), Array2::from_elem((1, gates), BN_GAMMA_INIT)),
            gamma_c: b.trainable(format!("{prefix}.gamma_c"), Array2::from_elem((1, hidden), BN_GAMMA_INIT)),
            beta_c: b.trainable(format!("{prefix}.beta_c"), Array2::zeros((1, hidden))),
            mean_x: b.buffer(format!("{prefix}.running_mean_x"), Array2::zeros((1, gates))),
            var_x: b.buffer(format!("{prefix}.running_var_x"), Array2::ones((1, gates))),
            mean_h: b.buffer(format!("{prefix}.running_mean_h"), Array2::zeros((1, gates))),
            var_h: b.buffer(format!("{prefix}.running_var_h"), Array2::ones((1, gates))),
            mean_c: b.buffer(format!("{prefix}.running_mean_c"), Array2::zeros((1, hidden))),
            var_c: b.buffer(format!("{prefix}.running_var_c"), Array2::ones((1, hidden))),
        }
    }

    /// Runs over a time-major input `[steps * batch, inputs]` and returns the
    /// hidden states `[steps * batch, hidden]` in the same time order. With
    /// `reverse` the recurrence runs from the last step to the first.
    ///
    /// The initial hidden state is zero, so the hidden-to-hidden term is
    /// omitted at the first processed step.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, steps: usize, batch: usize, reverse: bool) -> Var {
        let h = self.hidden;
        let w_x = ctx.p(self.w_x);
        let w_h = ctx.p(self.w_h);
        let bias = ctx.p(self.bias);
        let gamma_x = ctx.p(self.gamma_x);
        let gamma_h = ctx.p(self.gamma_h);
        let gamma_c = ctx.p(self.gamma_c);
        let beta_c = ctx.p(self.beta_c);

        let xw = ctx.tape.matmul(x, w_x);
        let xn = ctx.batch_norm(xw, batch, self.mean_x, self.var_x);
        let xn = ctx.tape.mul_row(xn, gamma_x);

        let mut outputs: Vec<Option<Var>> = vec![None; steps];
        let mut state: Option<(Var, Var)> = None;
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in order {
            let xt = ctx.tape.slice_rows(xn, t * batch, (t + 1) * batch);
            let pre = match state {
                None => xt,
                Some((h_prev, _)) => {
                    let hw = ctx.tape.matmul(h_prev, w_h);
                    let hn = ctx.batch_norm(hw, batch, self.mean_h, self.var_h);
                    let hn = ctx.tape.mul_row(hn, gamma_h);
                    ctx.tape.add(xt, hn)
                }
            };
            let pre = ctx.tape.add_row(pre, bias);
            let act = ctx.tape.sigmoid(pre);
            let i = ctx.tape.slice_cols(act, 0, h);
            let o = ctx.tape.slice_cols(act, 3 * h, 4 * h);
            let g_pre = ctx.tape.slice_cols(pre, 2 * h, 3 * h);
            let g = ctx.tape.tanh(g_pre);
            let ig = ctx.tape.mul(i, g);
            let c = match state {
                None => ig,
                Some((_, c_prev)) => {
                    let f = ctx.tape.slice_cols(act, h, 2 * h);
                    let fc = ctx.tape.mul(f, c_prev);
                    ctx.tape.add(fc, ig)
                }
            };
            let cn = ctx.batch_norm(c, batch, self.mean_c, self.var_c);
            let cn = ctx.tape.mul_row(cn, gamma_c);
            let cn = ctx.tape.add_row(cn, beta_c);
            let ct = ctx.tape.tanh(cn);
            let h_new = ctx.tape.mul(o, ct);
            outputs[t] = Some(h_new);
            state = Some((h_new, c));
        }
        let outputs: Vec<Var> = outputs.into_iter().map(|v| v.expect("every step visited")).collect();
        ctx.tape.concat_rows(&outputs)
    }
}

/// Forward and backward [`BnLstm`] with concatenated outputs and dropout.
#[derive(Debug, Clone)]
pub struct Blstm {
    pub forward: BnLstm,
    pub backward: BnLstm,
}

impl Blstm {
    /// `hidden_per_direction` units each way; output width is twice that.
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, prefix: &str, inputs: usize, hidden_per_direction: usize) -> Self {
        Self {
            forward: BnLstm::new(b, &format!("{prefix}.fwd"), inputs, hidden_per_direction),
            backward: BnLstm::new(b, &format!("{prefix}.bwd"), inputs, hidden_per_direction),
        }
    }

    pub fn output_width(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    /// Time-major `[steps * batch, inputs]` to `[steps * batch, 2 * hidden]`.
    /// Fails with the offending step index if any output is non-finite.
    pub fn run(&self, ctx: &mut Ctx<'_>, x: Var, steps: usize, batch: usize, stage: &'static str) -> Result<Var> {
        let f = self.forward.forward(ctx, x, steps, batch, false);
        let b = self.backward.forward(ctx, x, steps, batch, true);
        let out = ctx.tape.concat_cols(&[f, b]);
        check_finite_rows(ctx.tape.value(out), batch, stage)?;
        Ok(ctx.dropout(out))
    }
}

/// Errors with the time step of the first non-finite row of a time-major matrix.
pub fn check_finite_rows(values: &Array2<f64>, batch: usize, stage: &'static str) -> Result<()> {
    for (row, r) in values.rows().into_iter().enumerate() {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { stage, frame: row / batch.max(1) });
        }
    }
    Ok(())
}
