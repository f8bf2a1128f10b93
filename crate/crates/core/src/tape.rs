//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices. Every tensor on the tape is two-dimensional; sequences are laid
//! out time-major (row `t * batch + n`).

use std::rc::Rc;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use crate::params::ParamId;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    Reshape(Var),
    Dropout(Var, Array2<f64>),
    BatchNorm { x: Var, group: usize, inv_std: Array2<f64>, batch_stats: bool },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    SoftmaxCols(Var),
    WeightedTimeSum { frames: Var, weights: Var },
    CrossEntropy { logits: Var, targets: Rc<[usize]>, weights: Rc<[f64]>, probs: Array2<f64>, clamped: Vec<bool> },
    SumSquares(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients of a scalar with respect to every node, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

/// Batch statistics computed by a train-mode [`Tape::batch_norm`] call.
pub struct BatchStats {
    /// Mean over groups of the per-group column means.
    pub mean: Array2<f64>,
    /// Mean over groups of the per-group column (biased) variances.
    pub var: Array2<f64>,
}

/// Recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`]; zero and negative targets map to a large
/// negative finite value whose softplus underflows to zero.
pub fn softplus_inverse(y: f64) -> f64 {
    if y <= 0.0 {
        -1000.0
    } else if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A constant that receives no parameter gradient.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId, value: Array2<f64>) -> Var {
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// `a + b` with `b` a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(b).0, 1);
        let value = self.value(a) + self.value(b);
        self.push(value, Op::AddRow(a, b))
    }

    /// `a * b` with `b` a single row broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(b).0, 1);
        let value = self.value(a) * self.value(b);
        self.push(value, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("row concatenation shapes");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("column concatenation shapes");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Row `i` of the result is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> Var {
        let value = self.value(a).select(Axis(0), &index);
        self.push(value, Op::GatherRows(a, index))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        let flat: Vec<f64> = src.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("reshape preserves size");
        self.push(value, Op::Reshape(a))
    }

    /// Multiplies by a fixed (already rescaled) keep mask.
    pub fn dropout(&mut self, a: Var, mask: Array2<f64>) -> Var {
        let value = self.value(a) * &mask;
        self.push(value, Op::Dropout(a, mask))
    }

    /// Normalizes every column of each block of `group` consecutive rows with
    /// that block's own statistics. Returns the normalized values and the
    /// statistics averaged over blocks.
    pub fn batch_norm_train(&mut self, x: Var, group: usize, eps: f64) -> (Var, BatchStats) {
        let input = self.value(x);
        let (rows, cols) = input.dim();
        assert!(group > 0 && rows % group == 0, "batch norm group must divide rows");
        let groups = rows / group;
        let mut out = Array2::zeros((rows, cols));
        let mut inv_std = Array2::zeros((groups, cols));
        let mut mean_acc = Array2::zeros((1, cols));
        let mut var_acc = Array2::zeros((1, cols));
        for gi in 0..groups {
            let block = input.slice(s![gi * group..(gi + 1) * group, ..]);
            let mean = block.mean_axis(Axis(0)).expect("non-empty group");
            let var = block.map_axis(Axis(0), |col| {
                let m = col.mean().unwrap_or(0.0);
                col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64
            });
            let istd = var.mapv(|v| 1.0 / (v + eps).sqrt());
            let mut target = out.slice_mut(s![gi * group..(gi + 1) * group, ..]);
            Zip::from(target.rows_mut()).and(block.rows()).for_each(|mut o, b| {
                Zip::from(&mut o).and(&b).and(&mean).and(&istd).for_each(|o, &b, &m, &is| {
                    *o = (b - m) * is;
                });
            });
            inv_std.row_mut(gi).assign(&istd);
            mean_acc.row_mut(0).scaled_add(1.0 / groups as f64, &mean);
            var_acc.row_mut(0).scaled_add(1.0 / groups as f64, &var);
        }
        let var = self.push(out, Op::BatchNorm { x, group, inv_std, batch_stats: true });
        (var, BatchStats { mean: mean_acc, var: var_acc })
    }

    /// Normalizes with fixed statistics (`mean`, `var` are single rows).
    pub fn batch_norm_fixed(&mut self, x: Var, mean: &Array2<f64>, var: &Array2<f64>, eps: f64) -> Var {
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let value = (self.value(x) - mean) * &inv_std;
        let rows = value.nrows();
        self.push(value, Op::BatchNorm { x, group: rows, inv_std, batch_stats: false })
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let input = self.value(x);
        let mut out = input.clone();
        let mut inv_std = Vec::with_capacity(input.nrows());
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    /// Softmax down each column (over rows), max-subtracted.
    pub fn softmax_cols(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut col in out.columns_mut() {
            let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            col.mapv_inplace(|v| (v - max).exp());
            let sum = col.sum();
            col.mapv_inplace(|v| v / sum);
        }
        self.push(out, Op::SoftmaxCols(x))
    }

    /// `out[n] = sum_t weights[t, n] * frames[t * N + n]` for time-major
    /// `frames` of shape `[T*N, H]` and `weights` of shape `[T, N]`.
    pub fn weighted_time_sum(&mut self, frames: Var, weights: Var) -> Var {
        let f = self.value(frames);
        let w = self.value(weights);
        let (steps, batch) = w.dim();
        assert_eq!(f.nrows(), steps * batch, "weighted_time_sum: frames/weights mismatch");
        let mut out = Array2::zeros((batch, f.ncols()));
        for t in 0..steps {
            for n in 0..batch {
                out.row_mut(n).scaled_add(w[[t, n]], &f.row(t * batch + n));
            }
        }
        self.push(out, Op::WeightedTimeSum { frames, weights })
    }

    /// Weighted mean over rows of `-log softmax(logits)[target]`, with the log
    /// probability clamped below at `ln(floor)`. Rows with zero weight do not
    /// contribute; if every weight is zero the result is zero.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Rc<[usize]>,
        weights: Rc<[f64]>,
        floor: f64,
    ) -> Var {
        let z = self.value(logits);
        let probs = softmax_rows(z);
        let log_floor = floor.ln();
        let total: f64 = weights.iter().sum();
        let mut loss = 0.0;
        let mut clamped = Vec::with_capacity(z.nrows());
        for (i, row) in z.rows().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let logp = row[targets[i]] - lse;
            let is_clamped = logp < log_floor;
            clamped.push(is_clamped);
            if weights[i] != 0.0 {
                loss -= weights[i] * logp.max(log_floor);
            }
        }
        let value = if total > 0.0 { loss / total } else { 0.0 };
        self.push(Array2::from_elem((1, 1), value), Op::CrossEntropy { logits, targets, weights, probs, clamped })
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v * v).sum::<f64>();
        self.push(Array2::from_elem((1, 1), value), Op::SumSquares(x))
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    /// Gradients of the scalar node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Array2::ones(self.value(root).dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Accumulated gradient for every parameter node, in tape order.
    pub fn param_grads<'a>(&'a self, grads: &'a Gradients) -> impl Iterator<Item = (ParamId, &'a Array2<f64>)> {
        self.nodes.iter().enumerate().filter_map(move |(i, node)| match node.op {
            Op::Param(id) => grads.grads.get(i).and_then(|g| g.as_ref()).map(|g| (id, g)),
            _ => None,
        })
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.value(*b).t());
                let gb = self.value(*a).t().dot(g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate_ref(grads, *a, g);
                accumulate_ref(grads, *b, g);
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * self.value(*b));
                accumulate(grads, *b, g * self.value(*a));
            }
            Op::AddRow(a, b) => {
                accumulate_ref(grads, *a, g);
                accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, b) => {
                accumulate(grads, *a, g * self.value(*b));
                let gb = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(grads, *b, gb);
            }
            Op::Scale(a, factor) => accumulate(grads, *a, g * *factor),
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(&node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(&node.value).for_each(|d, &y| {
                    if y <= 0.0 {
                        *d = 0.0
                    }
                });
                accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(*a)).for_each(|d, &x| *d *= sigmoid(x));
                accumulate(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let mut view = slot(grads, *a, self.value(*a).dim()).slice_mut(s![*start..*start + g.nrows(), ..]);
                view += g;
            }
            Op::SliceCols(a, start) => {
                let mut view = slot(grads, *a, self.value(*a).dim()).slice_mut(s![.., *start..*start + g.ncols()]);
                view += g;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).nrows();
                    accumulate(grads, p, g.slice(s![offset..offset + rows, ..]).to_owned());
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).ncols();
                    accumulate(grads, p, g.slice(s![.., offset..offset + cols]).to_owned());
                    offset += cols;
                }
            }
            Op::GatherRows(a, index) => {
                let ga = slot(grads, *a, self.value(*a).dim());
                for (row, &src) in index.iter().enumerate() {
                    let mut target = ga.row_mut(src);
                    target += &g.row(row);
                }
            }
            Op::Reshape(a) => {
                let dim = self.value(*a).dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                accumulate(grads, *a, Array2::from_shape_vec(dim, flat).expect("reshape back"));
            }
            Op::Dropout(a, mask) => accumulate(grads, *a, g * mask),
            Op::BatchNorm { x, group, inv_std, batch_stats } => {
                let y = &node.value;
                let (rows, cols) = y.dim();
                let mut gx = Array2::zeros((rows, cols));
                if *batch_stats {
                    let n = *group as f64;
                    for gi in 0..rows / group {
                        let range = gi * group..(gi + 1) * group;
                        let gy = g.slice(s![range.clone(), ..]);
                        let yy = y.slice(s![range.clone(), ..]);
                        let sum_g = gy.sum_axis(Axis(0));
                        let sum_gy = (&gy * &yy).sum_axis(Axis(0));
                        let istd = inv_std.row(gi);
                        let mut target = gx.slice_mut(s![range, ..]);
                        Zip::from(target.rows_mut()).and(gy.rows()).and(yy.rows()).for_each(
                            |mut t, gr, yr| {
                                for c in 0..cols {
                                    t[c] = istd[c] / n * (n * gr[c] - sum_g[c] - yr[c] * sum_gy[c]);
                                }
                            },
                        );
                    }
                } else {
                    gx.assign(&(g * inv_std));
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let mut gx = Array2::zeros(y.dim());
                let d = y.ncols() as f64;
                for (r, mut out) in gx.rows_mut().into_iter().enumerate() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let sum_g = gr.sum();
                    let sum_gy = gr.dot(&yr);
                    let is = inv_std[r];
                    for c in 0..out.len() {
                        out[c] = is / d * (d * gr[c] - sum_g - yr[c] * sum_gy);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SoftmaxCols(x) => {
                let y = &node.value;
                let mut gx = Array2::zeros(y.dim());
                for c in 0..y.ncols() {
                    let yc = y.column(c);
                    let gc = g.column(c);
                    let dot = yc.dot(&gc);
                    for r in 0..y.nrows() {
                        gx[[r, c]] = yc[r] * (gc[r] - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::WeightedTimeSum { frames, weights } => {
                let f = self.value(*frames);
                let w = self.value(*weights);
                let (steps, batch) = w.dim();
                let mut gf = Array2::zeros(f.dim());
                let mut gw = Array2::zeros(w.dim());
                for t in 0..steps {
                    for n in 0..batch {
                        let row = t * batch + n;
                        gf.row_mut(row).scaled_add(w[[t, n]], &g.row(n));
                        gw[[t, n]] = f.row(row).dot(&g.row(n));
                    }
                }
                accumulate(grads, *frames, gf);
                accumulate(grads, *weights, gw);
            }
            Op::CrossEntropy { logits, targets, weights, probs, clamped } => {
                let total: f64 = weights.iter().sum();
                let upstream = g[[0, 0]];
                let mut gz = Array2::zeros(probs.dim());
                if total > 0.0 {
                    for (i, mut row) in gz.rows_mut().into_iter().enumerate() {
                        if weights[i] == 0.0 || clamped[i] {
                            continue;
                        }
                        let scale = upstream * weights[i] / total;
                        row.assign(&probs.row(i));
                        row[targets[i]] -= 1.0;
                        row.mapv_inplace(|v| v * scale);
                    }
                }
                accumulate(grads, *logits, gz);
            }
            Op::SumSquares(x) => {
                let upstream = g[[0, 0]];
                accumulate(grads, *x, self.value(*x) * (2.0 * upstream));
            }
        }
    }
}

/// Row-wise softmax, max-subtracted.
pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// The gradient buffer of `v`, zero-initialized on first use.
fn slot(grads: &mut [Option<Array2<f64>>], v: Var, dim: (usize, usize)) -> &mut Array2<f64> {
    grads[v.0].get_or_insert_with(|| Array2::zeros(dim))
}

fn accumulate_ref(grads: &mut [Option<Array2<f64>>], v: Var, g: &Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += g,
        slot @ None => *slot = Some(g.clone()),
    }
}
