use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lseq_core::formats::FeatureRecording;
use lseq_core::RunConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_ENV: &str = "LSEQ_RUN_ROOT";

/// Default run directory name: variant, sequence length and seed.
pub fn default_run_name(config: &RunConfig) -> String {
    let m = &config.model;
    match m.variant {
        lseq_core::Variant::Folded => format!("folded-L{}-{}x{}-seed{}", m.seq_len, m.fold_b, m.fold_k, config.train.seed),
        lseq_core::Variant::Flat => format!("flat-L{}-seed{}", m.seq_len, config.train.seed),
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Subjects assigned to training, validation and test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SubjectSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SubjectSplit {
    /// Shuffles the sorted subject list with `seed`, then takes test
    /// subjects first and validation subjects next.
    pub fn new(subjects: &[String], validation: usize, test: usize, seed: u64) -> Result<Self> {
        let mut all: Vec<String> = subjects.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        if validation == 0 {
            bail!("at least one validation subject is required");
        }
        if all.len() < validation + test + 1 {
            bail!("{} subjects cannot cover {validation} validation and {test} test subjects plus training", all.len());
        }
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut rest = all.split_off(test);
        let test_set = all;
        let train = rest.split_off(validation);
        let sorted = |mut v: Vec<String>| {
            v.sort();
            v
        };
        Ok(Self { train: sorted(train), validation: sorted(rest), test: sorted(test_set) })
    }

    pub fn from_fold(fold: &lseq_core::evaluation::Fold) -> Self {
        Self { train: fold.train.clone(), validation: fold.validation.clone(), test: fold.test.clone() }
    }
}

/// Recordings whose subject is in `subjects`, in input order.
pub fn select(recordings: &[FeatureRecording], subjects: &[String]) -> Vec<FeatureRecording> {
    recordings.iter().filter(|r| subjects.contains(&r.subject_id)).cloned().collect()
}

pub fn subjects_of(recordings: &[FeatureRecording]) -> Vec<String> {
    recordings.iter().map(|r| r.subject_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

pub fn load_features(dir: &Path) -> Result<Vec<FeatureRecording>> {
    let recordings =
        lseq_core::formats::read_feature_dir(dir).with_context(|| format!("reading features from {}", dir.display()))?;
    if recordings.is_empty() {
        bail!("no feature archives in {}", dir.display());
    }
    Ok(recordings)
}

/// `explicit` when given, else `root/name`.
pub fn run_dir(explicit: Option<PathBuf>, root: &Path, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| root.join(name))
}
