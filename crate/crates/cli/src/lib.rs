//! Pipelines behind the `lseq` binary: synthetic data, feature
//! preparation, training runs, evaluation reports, benchmarks and
//! prediction. Each command writes plain files (CSV, TOML, JSON, SVG and
//! binary archives) into an output directory.

pub mod benchmark;
pub mod evaluate;
pub mod plot;
pub mod predict;
pub mod prepare;
pub mod runs;
pub mod synth;
pub mod train;
