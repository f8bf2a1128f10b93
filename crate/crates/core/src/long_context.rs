//! Long-sequence modelling by folding: an `L`-epoch sequence is cut into `B`
//! subsequences of `K` epochs, modelled along each subsequence (intra), then
//! across subsequences at each position (inter), and unfolded again. Each
//! sample takes `K + B` sequential recurrent steps instead of `L`.

use std::rc::Rc;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Blstm, Ctx, Mode, ParamBuilder, ResidualProjection};
use crate::params::ParamStore;
use crate::tape::Var;

/// Sequence length `l` split into `b` subsequences of length `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FoldSpec {
    pub l: usize,
    pub b: usize,
    pub k: usize,
}

impl FoldSpec {
    pub fn new(l: usize, b: usize, k: usize) -> Result<Self> {
        if b == 0 || k == 0 {
            return Err(Error::FoldSpec(format!("B={b} and K={k} must both be at least 1")));
        }
        if b * k != l {
            return Err(Error::FoldSpec(format!("L={l} is not B*K = {b}*{k}")));
        }
        Ok(Self { l, b, k })
    }

    /// Single subsequence covering the whole sequence.
    pub fn flat(l: usize) -> Self {
        Self { l, b: 1, k: l }
    }

    /// 1-based position `ell` to 1-based `(b, k)`.
    pub fn fold_index(&self, ell: usize) -> (usize, usize) {
        debug_assert!(ell >= 1 && ell <= self.l);
        ((ell - 1) / self.k + 1, (ell - 1) % self.k + 1)
    }

    /// 1-based `(b, k)` to 1-based position.
    pub fn unfold_index(&self, b: usize, k: usize) -> usize {
        (b - 1) * self.k + k
    }
}

/// Values laid out on the `B x K` grid, `[B, K, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedGrid {
    pub values: Array3<f64>,
    pub spec: FoldSpec,
}

/// `[L, D]` to the `[B, K, D]` grid.
pub fn fold(sequence: &Array2<f64>, spec: FoldSpec) -> Result<FoldedGrid> {
    let (l, d) = sequence.dim();
    if l != spec.l {
        return Err(Error::FoldSpec(format!("sequence has {l} elements, spec expects L={}", spec.l)));
    }
    let mut values = Array3::zeros((spec.b, spec.k, d));
    for ell in 1..=l {
        let (b, k) = spec.fold_index(ell);
        values.slice_mut(ndarray::s![b - 1, k - 1, ..]).assign(&sequence.row(ell - 1));
    }
    Ok(FoldedGrid { values, spec })
}

/// Inverse of [`fold`].
pub fn unfold(grid: &FoldedGrid) -> Result<Array2<f64>> {
    let (b, k, d) = grid.values.dim();
    if b != grid.spec.b || k != grid.spec.k {
        return Err(Error::Shape(format!("grid {b}x{k} does not match spec {}x{}", grid.spec.b, grid.spec.k)));
    }
    let mut out = Array2::zeros((grid.spec.l, d));
    for bi in 1..=b {
        for ki in 1..=k {
            let ell = grid.spec.unfold_index(bi, ki);
            out.row_mut(ell - 1).assign(&grid.values.slice(ndarray::s![bi - 1, ki - 1, ..]));
        }
    }
    Ok(out)
}

/// Row permutations between the batched layouts used on the tape, for
/// `sequences` samples. The sample-major layout has row `s*L + ell`; the intra
/// layout is time-major over `k` with batch `(s, b)`; the inter layout is
/// time-major over `b` with batch `(s, k)`.
#[derive(Debug, Clone)]
pub struct FoldLayout {
    pub to_intra: Rc<[usize]>,
    pub intra_to_inter: Rc<[usize]>,
    pub inter_to_samples: Rc<[usize]>,
    pub intra_to_samples: Rc<[usize]>,
}

impl FoldLayout {
    pub fn new(spec: FoldSpec, sequences: usize) -> Self {
        let FoldSpec { l, b: nb, k: nk } = spec;
        let s_count = sequences;
        let mut to_intra = Vec::with_capacity(l * s_count);
        for k in 0..nk {
            for s in 0..s_count {
                for b in 0..nb {
                    to_intra.push(s * l + b * nk + k);
                }
            }
        }
        let intra_row = |s: usize, b: usize, k: usize| k * (s_count * nb) + s * nb + b;
        let inter_row = |s: usize, b: usize, k: usize| b * (s_count * nk) + s * nk + k;
        let mut intra_to_inter = Vec::with_capacity(l * s_count);
        for b in 0..nb {
            for s in 0..s_count {
                for k in 0..nk {
                    intra_to_inter.push(intra_row(s, b, k));
                }
            }
        }
        let mut inter_to_samples = Vec::with_capacity(l * s_count);
        let mut intra_to_samples = Vec::with_capacity(l * s_count);
        for s in 0..s_count {
            for b in 0..nb {
                for k in 0..nk {
                    inter_to_samples.push(inter_row(s, b, k));
                    intra_to_samples.push(intra_row(s, b, k));
                }
            }
        }
        Self {
            to_intra: to_intra.into(),
            intra_to_inter: intra_to_inter.into(),
            inter_to_samples: inter_to_samples.into(),
            intra_to_samples: intra_to_samples.into(),
        }
    }
}

/// A BLSTM followed by the residual projection block.
#[derive(Debug, Clone)]
pub struct RecurrentStage {
    pub blstm: Blstm,
    pub residual: ResidualProjection,
}

impl RecurrentStage {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, prefix: &str, inputs: usize, width: usize) -> Result<Self> {
        if width % 2 != 0 {
            return Err(Error::Config(format!("{prefix}: width {width} must be even")));
        }
        let blstm = Blstm::new(b, &format!("{prefix}.blstm"), inputs, width / 2);
        let residual = ResidualProjection::new(b, &format!("{prefix}.residual"), width);
        Ok(Self { blstm, residual })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, steps: usize, batch: usize, stage: &'static str) -> Result<Var> {
        let h = self.blstm.run(ctx, x, steps, batch, stage)?;
        Ok(self.residual.forward(ctx, h))
    }
}

/// Intra-subsequence stage, and the inter-subsequence stage unless it has
/// been removed (the flat baseline).
#[derive(Debug, Clone)]
pub struct LongContext {
    pub intra: RecurrentStage,
    pub inter: Option<RecurrentStage>,
}

impl LongContext {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        prefix: &str,
        inputs: usize,
        hidden_ss: usize,
        hidden_ws: Option<usize>,
    ) -> Result<Self> {
        let intra = RecurrentStage::new(b, &format!("{prefix}.intra"), inputs, hidden_ss)?;
        let inter = hidden_ws
            .map(|w| RecurrentStage::new(b, &format!("{prefix}.inter"), hidden_ss, w))
            .transpose()?;
        Ok(Self { intra, inter })
    }

    pub fn output_width(&self) -> usize {
        match &self.inter {
            Some(stage) => stage.blstm.output_width(),
            None => self.intra.blstm.output_width(),
        }
    }

    /// Intra stage on sample-major rows; returns the intra layout.
    pub fn intra_stage(&self, ctx: &mut Ctx<'_>, x: Var, spec: FoldSpec, layout: &FoldLayout, sequences: usize) -> Result<Var> {
        let folded = ctx.tape.gather_rows(x, layout.to_intra.clone());
        ctx.seq_steps += spec.k;
        self.intra.forward(ctx, folded, spec.k, sequences * spec.b, "intra-subsequence")
    }

    /// Sample-major `[S*L, D]` embeddings to sample-major `[S*L, H]` outputs.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, spec: FoldSpec, sequences: usize) -> Result<Var> {
        let layout = FoldLayout::new(spec, sequences);
        let intra = self.intra_stage(ctx, x, spec, &layout, sequences)?;
        match &self.inter {
            None => Ok(ctx.tape.gather_rows(intra, layout.intra_to_samples.clone())),
            Some(stage) => {
                let across = ctx.tape.gather_rows(intra, layout.intra_to_inter.clone());
                ctx.seq_steps += spec.b;
                let out = stage.forward(ctx, across, spec.b, sequences * spec.k, "inter-subsequence")?;
                Ok(ctx.tape.gather_rows(out, layout.inter_to_samples.clone()))
            }
        }
    }
}

fn grid_to_rows(grid: &FoldedGrid) -> Array2<f64> {
    let (b, k, d) = grid.values.dim();
    grid.values.to_shape((b * k, d)).expect("contiguous grid").to_owned()
}

fn rows_to_grid(rows: Array2<f64>, spec: FoldSpec) -> FoldedGrid {
    let d = rows.ncols();
    FoldedGrid { values: rows.into_shape_with_order((spec.b, spec.k, d)).expect("grid size"), spec }
}

/// Runs `stage` independently along every row of the grid (each subsequence).
pub fn intra_subsequence(grid: &FoldedGrid, stage: &RecurrentStage, store: &ParamStore, mode: Mode) -> Result<FoldedGrid> {
    let spec = grid.spec;
    let mut ctx = Ctx::new(store, mode);
    let x = ctx.tape.input(grid_to_rows(grid));
    let layout = FoldLayout::new(spec, 1);
    let folded = ctx.tape.gather_rows(x, layout.to_intra.clone());
    let out = stage.forward(&mut ctx, folded, spec.k, spec.b, "intra-subsequence")?;
    let back = ctx.tape.gather_rows(out, layout.intra_to_samples.clone());
    Ok(rows_to_grid(ctx.tape.value(back).clone(), spec))
}

/// Runs `stage` independently down every column of the grid (each position).
pub fn inter_subsequence(grid: &FoldedGrid, stage: &RecurrentStage, store: &ParamStore, mode: Mode) -> Result<FoldedGrid> {
    let spec = grid.spec;
    let mut ctx = Ctx::new(store, mode);
    // for a single sample, grid rows (b, k) are already time-major over b
    let across = ctx.tape.input(grid_to_rows(grid));
    let out = stage.forward(&mut ctx, across, spec.b, spec.k, "inter-subsequence")?;
    Ok(rows_to_grid(ctx.tape.value(out).clone(), spec))
}

/// Folded encoding of one `[L, D]` sequence, with the number of sequential
/// recurrent steps taken.
pub fn encode_long_sequence(
    embeddings: &Array2<f64>,
    spec: FoldSpec,
    module: &LongContext,
    store: &ParamStore,
    mode: Mode,
) -> Result<(Array2<f64>, usize)> {
    if embeddings.nrows() != spec.l {
        return Err(Error::FoldSpec(format!("sequence has {} elements, spec expects L={}", embeddings.nrows(), spec.l)));
    }
    let mut ctx = Ctx::new(store, mode);
    let x = ctx.tape.input(embeddings.clone());
    let out = module.forward(&mut ctx, x, spec, 1)?;
    Ok((ctx.tape.value(out).clone(), ctx.seq_steps))
}
