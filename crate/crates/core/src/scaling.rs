//! Wall-clock cost of training steps across sequence lengths and fold
//! shapes.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::NUM_CLASSES;
use crate::model::{Model, ModelConfig, SequenceBatch, Variant};
use crate::optim::Adam;
use crate::train::{step_rng, train_step, TrainConfig};

/// One benchmark configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPoint {
    pub variant: Variant,
    pub l: usize,
    pub b: usize,
    pub k: usize,
}

impl GridPoint {
    pub fn flat(l: usize) -> Self {
        Self { variant: Variant::Flat, l, b: 1, k: l }
    }

    pub fn folded(b: usize, k: usize) -> Self {
        Self { variant: Variant::Folded, l: b * k, b, k }
    }

    /// Sequential recurrent steps per sample in the long-context module.
    pub fn analytic_steps(&self) -> usize {
        match self.variant {
            Variant::Folded => self.b + self.k,
            Variant::Flat => self.l,
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig { variant: self.variant, seq_len: self.l, fold_b: self.b, fold_k: self.k, ..base.clone() }
    }
}

impl fmt::Display for GridPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant {
            Variant::Flat => write!(f, "flat:{}", self.l),
            Variant::Folded => write!(f, "folded:{}x{}", self.b, self.k),
        }
    }
}

impl FromStr for GridPoint {
    type Err = Error;

    /// `flat:L` or `folded:BxK`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("grid entry {s:?} is not flat:L or folded:BxK"));
        let (kind, rest) = s.trim().split_once(':').ok_or_else(bad)?;
        match kind {
            "flat" => Ok(Self::flat(rest.parse().map_err(|_| bad())?)),
            "folded" => {
                let (b, k) = rest.split_once('x').ok_or_else(bad)?;
                Ok(Self::folded(b.parse().map_err(|_| bad())?, k.parse().map_err(|_| bad())?))
            }
            _ => Err(bad()),
        }
    }
}

/// Parses a comma-separated grid; duplicates are rejected.
pub fn parse_grid(spec: &str) -> Result<Vec<GridPoint>> {
    let grid: Vec<GridPoint> = spec.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    check_grid(&grid)?;
    Ok(grid)
}

pub fn check_grid(grid: &[GridPoint]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("benchmark grid is empty".into()));
    }
    let mut seen = BTreeSet::new();
    for g in grid {
        if !seen.insert(*g) {
            return Err(Error::Config(format!("duplicate grid entry {g}")));
        }
    }
    Ok(())
}

/// The sequence-length study grid: flat 20/100/200 and folded 200 at two
/// fold shapes.
pub fn default_grid() -> Vec<GridPoint> {
    vec![GridPoint::flat(20), GridPoint::flat(100), GridPoint::flat(200), GridPoint::folded(10, 20), GridPoint::folded(20, 10)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub variant: Variant,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub steps: usize,
    pub wall_clock_s: f64,
    /// Measured sequential step count of one sample.
    pub seq_steps: usize,
    /// Wall clock relative to the flat L=20 row; empty without one.
    pub ratio_vs_flat20: Option<f64>,
}

/// A random batch of `sequences` sequences for `config`.
pub fn random_batch(config: &ModelConfig, sequences: usize, seed: u64) -> Result<SequenceBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sequences * config.seq_len;
    let images = Array2::from_shape_fn((config.frames * n, config.bins), |_| rng.sample::<f64, _>(StandardNormal));
    let labels = (0..n).map(|_| rng.gen_range(0..NUM_CLASSES)).collect();
    Ok(SequenceBatch { sequences, seq_len: config.seq_len, frames: config.frames, images, labels, mask: vec![1.0; n] })
}

/// Sequential steps counted during a forward pass of one sample.
pub fn measure_seq_steps(config: &ModelConfig) -> Result<usize> {
    let (model, store) = Model::build(config, 0)?;
    let batch = random_batch(config, 1, 0)?;
    model.measured_sequential_steps(&store, &batch)
}

/// Times `steps` optimizer steps per grid point, strictly serially, on a
/// fixed random batch of `minibatch` sequences.
pub fn benchmark_scaling(
    base: &ModelConfig,
    grid: &[GridPoint],
    steps: usize,
    minibatch: usize,
    train: &TrainConfig,
    mut progress: impl FnMut(&ScalingRow),
) -> Result<Vec<ScalingRow>> {
    check_grid(grid)?;
    let mut rows = Vec::with_capacity(grid.len());
    for (i, g) in grid.iter().enumerate() {
        let config = g.apply(base);
        let (model, mut store) = Model::build(&config, train.seed)?;
        let batch = random_batch(&config, minibatch, train.seed.wrapping_add(i as u64))?;
        let seq_steps = measure_seq_steps(&config)?;
        let mut adam = Adam::new(train.adam(), &store);
        let started = Instant::now();
        for s in 0..steps {
            if train_step(&model, &mut store, &mut adam, &batch, step_rng(train.seed, s as u64))?.is_none() {
                return Err(Error::Evaluation(format!("{g}: non-finite loss at step {}", s + 1)));
            }
        }
        let wall_clock_s = started.elapsed().as_secs_f64();
        let row = ScalingRow { variant: g.variant, l: g.l, b: g.b, k: g.k, steps, wall_clock_s, seq_steps, ratio_vs_flat20: None };
        progress(&row);
        rows.push(row);
    }
    let reference = rows.iter().find(|r| r.variant == Variant::Flat && r.l == 20).map(|r| r.wall_clock_s);
    if let Some(base) = reference {
        for r in &mut rows {
            r.ratio_vs_flat20 = Some(r.wall_clock_s / base);
        }
    }
    Ok(rows)
}

/// Writes rows as CSV with the columns
/// `variant,L,B,K,steps,wall_clock_s,seq_steps,ratio_vs_flat20`.
pub fn scaling_csv(rows: &[ScalingRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::format("scaling csv", e.to_string()))
}
