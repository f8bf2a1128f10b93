//! Long-sequence sleep staging from single-channel EEG.
//!
//! The pipeline turns 30-second epochs into log-magnitude time–frequency
//! images, encodes each epoch with a learned filterbank, a recurrent layer
//! and attention pooling, and models long runs of epochs by folding them into
//! a grid of short subsequences processed along both axes.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod frontend;
pub mod long_context;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scaling;
pub mod synth;
pub mod tape;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use encoder::{EpochEmbedding, EpochEncoder, FilterbankParams};
pub use error::{Error, Result};
pub use evaluation::{ConfusionMatrix, MetricReport};
pub use formats::{FeatureRecording, Manifest};
pub use frontend::{Hypnogram, RawEpoch, RawLabel, Stage, TimeFreqImage};
pub use long_context::{FoldSpec, FoldedGrid};
pub use model::{Model, ModelConfig, PredictionSequence, SequenceBatch, Variant};
pub use nn::Mode;
pub use params::ParamStore;
pub use synth::SynthConfig;
pub use train::TrainConfig;
