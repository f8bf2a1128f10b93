use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lseq_core::evaluation::{score_recording, TrainedModel};
use lseq_core::formats::{FeatureRecording, FEATURE_EXTENSION};
use lseq_core::frontend::Stage;
use lseq_core::{Checkpoint, Model};
use ndarray::Array2;

use crate::runs::{create_dir, load_features};

/// Per-epoch hypnogram CSV: epoch index in the original recording, predicted
/// stage, reference stage (empty when masked) and class posteriors.
pub fn hypnogram_csv(rec: &FeatureRecording, posteriors: &Array2<f64>, predicted: &[Stage]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["epoch".to_string(), "predicted".into(), "reference".into()];
    header.extend(Stage::ALL.iter().map(|s| format!("p_{}", s.name())));
    w.write_record(&header)?;
    for (i, stage) in predicted.iter().enumerate() {
        let mut row = vec![
            (rec.first_epoch + i).to_string(),
            stage.name().to_string(),
            rec.hypnogram.stage(i).map(|s| s.name().to_string()).unwrap_or_default(),
        ];
        row.extend(posteriors.row(i).iter().map(|p| format!("{p:.6}")));
        w.write_record(&row)?;
    }
    Ok(w.into_inner()?)
}

/// Writes `<recording_id>.csv` for every archive at `features` (a file or a
/// directory) and returns the written paths.
pub fn predict(checkpoint: &Path, features: &Path, stride: usize, batch_size: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::read(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let (model, mut params) = Model::build(&ck.meta.model, 0)?;
    ck.load_into(&ck.meta.model, &mut params)?;
    let recordings = if features.is_dir() {
        load_features(features)?
    } else if features.extension().is_some_and(|e| e == FEATURE_EXTENSION) {
        vec![FeatureRecording::read(features)?]
    } else {
        anyhow::bail!("{} is neither a feature archive nor a directory", features.display());
    };
    create_dir(out_dir)?;
    let scorer = TrainedModel { model: &model, params: &params };
    let stride = if stride == 0 { model.config.seq_len } else { stride };
    let mut written = Vec::with_capacity(recordings.len());
    for rec in &recordings {
        let pred = score_recording(&scorer, rec, stride, batch_size)?;
        let path = out_dir.join(format!("{}.csv", rec.recording_id));
        std::fs::write(&path, hypnogram_csv(rec, &pred.posteriors, &pred.predicted)?)
            .with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}
