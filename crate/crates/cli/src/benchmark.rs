use std::path::Path;

use anyhow::{Context, Result};
use lseq_core::scaling::{benchmark_scaling, scaling_csv, GridPoint, ScalingRow};
use lseq_core::{ModelConfig, TrainConfig};

use crate::plot;
use crate::runs::{create_dir, write_text};

/// Times `steps` optimizer steps per grid point and writes `scaling.csv`
/// and `scaling.svg`.
pub fn benchmark(
    base: &ModelConfig,
    train: &TrainConfig,
    grid: &[GridPoint],
    steps: usize,
    minibatch: usize,
    out_dir: &Path,
) -> Result<Vec<ScalingRow>> {
    create_dir(out_dir)?;
    let rows = benchmark_scaling(base, grid, steps, minibatch, train, |row| {
        log::info!(
            "{} L={} B={} K={}: {:.2} s for {} steps, {} sequential steps",
            row.variant,
            row.l,
            row.b,
            row.k,
            row.wall_clock_s,
            row.steps,
            row.seq_steps
        );
    })?;
    let csv_path = out_dir.join("scaling.csv");
    std::fs::write(&csv_path, scaling_csv(&rows)?).with_context(|| format!("writing {}", csv_path.display()))?;
    write_text(&out_dir.join("scaling.svg"), &plot::scaling_curve(&rows))?;
    Ok(rows)
}
