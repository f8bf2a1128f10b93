use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lseq_core::formats::{prepare_recording, Manifest, ManifestRow, PrepareOptions, FEATURE_EXTENSION};
use serde::Serialize;

use crate::runs::create_dir;

/// Outcome of one manifest row, as written to `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrepareRow {
    pub recording_id: String,
    pub subject_id: String,
    pub status: &'static str,
    pub epochs: usize,
    pub masked: usize,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct PrepareSummary {
    pub rows: Vec<PrepareRow>,
    pub summary_path: PathBuf,
}

impl PrepareSummary {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status != "ok").count()
    }
}

fn prepare_one(manifest: &Manifest, row: &ManifestRow, options: &PrepareOptions, out_dir: &Path) -> PrepareRow {
    let result = prepare_recording(manifest, row, options).and_then(|rec| {
        rec.write(&out_dir.join(format!("{}.{FEATURE_EXTENSION}", rec.recording_id)))?;
        Ok(rec)
    });
    match result {
        Ok(rec) => PrepareRow {
            recording_id: row.recording_id.clone(),
            subject_id: row.subject_id.clone(),
            status: "ok",
            epochs: rec.len(),
            masked: rec.hypnogram.masked_epochs(),
            error: String::new(),
        },
        Err(e) => {
            log::error!("{}: {e}", row.recording_id);
            PrepareRow {
                recording_id: row.recording_id.clone(),
                subject_id: row.subject_id.clone(),
                status: "failed",
                epochs: 0,
                masked: 0,
                error: e.to_string(),
            }
        }
    }
}

/// Turns every manifest row into a feature archive in `out_dir` and writes
/// `summary.csv`. A failing row is recorded and does not stop the others.
pub fn prepare(manifest_path: &Path, out_dir: &Path, options: &PrepareOptions, workers: usize) -> Result<PrepareSummary> {
    let manifest = Manifest::read(manifest_path).with_context(|| format!("reading manifest {}", manifest_path.display()))?;
    if manifest.rows.is_empty() {
        bail!("no recordings in {}", manifest_path.display());
    }
    create_dir(out_dir)?;
    let n = manifest.rows.len();
    let workers = workers.clamp(1, n);
    let mut rows: Vec<(usize, PrepareRow)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let manifest = &manifest;
                s.spawn(move || {
                    (w..n).step_by(workers).map(|i| (i, prepare_one(manifest, &manifest.rows[i], options, out_dir))).collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("prepare thread panicked")).collect()
    });
    rows.sort_by_key(|(i, _)| *i);
    let rows: Vec<PrepareRow> = rows.into_iter().map(|(_, r)| r).collect();

    let summary_path = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_path).with_context(|| format!("writing {}", summary_path.display()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    for r in rows.iter().filter(|r| r.status == "ok") {
        log::info!("{}: {} epochs, {} masked", r.recording_id, r.epochs, r.masked);
    }
    Ok(PrepareSummary { rows, summary_path })
}
