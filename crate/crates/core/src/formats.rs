//! On-disk formats: raw signal files, label files, the recording manifest and
//! per-recording feature archives.
//!
//! Binary containers start with an 8-byte magic string followed by a
//! `major.minor` schema version (two little-endian `u16`). Readers refuse a
//! newer major version.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{
    harmonize_labels, resample, trim_to_in_bed, zscore_recording, Hypnogram, RawLabelStream, Spectrogram, Stage,
    StftParams, TimeFreqImage, CANONICAL_SAMPLE_RATE, EPOCH_SECONDS,
};

pub const SIGNAL_MAGIC: &[u8; 8] = b"LSQSIG\0\0";
pub const FEATURE_MAGIC: &[u8; 8] = b"LSQFEAT\0";
pub const SIGNAL_VERSION: (u16, u16) = (1, 0);
pub const FEATURE_VERSION: (u16, u16) = (1, 0);

/// Little-endian byte sink.
#[derive(Debug, Default)]
pub struct Encoder {
    pub buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn header(&mut self, magic: &[u8; 8], version: (u16, u16)) {
        self.buf.extend_from_slice(magic);
        self.u16(version.0);
        self.u16(version.1);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
    }

    pub fn str(&mut self, v: &str) {
        self.bytes(v.as_bytes());
    }

    pub fn matrix_f64(&mut self, m: &Array2<f64>) {
        self.u32(m.nrows() as u32);
        self.u32(m.ncols() as u32);
        for &v in m.iter() {
            self.f64(v);
        }
    }
}

/// Little-endian byte source with bounds checks.
#[derive(Debug)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    context: String,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8], context: impl Into<String>) -> Self {
        Self { buf, pos: 0, context: context.into() }
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::format(self.context.clone(), format!("{} (at byte {})", message.into(), self.pos))
    }

    /// Checks magic and major version; returns the version read.
    pub fn header(&mut self, magic: &[u8; 8], supported: (u16, u16), what: &'static str) -> Result<(u16, u16)> {
        let found = self.take(8)?;
        if found != magic {
            return Err(self.error(format!("bad magic {:?}", String::from_utf8_lossy(found))));
        }
        let major = self.u16()?;
        let minor = self.u16()?;
        if major > supported.0 {
            return Err(Error::Version { what, found: major as u32, supported: supported.0 as u32 });
        }
        Ok((major, minor))
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.error(format!("truncated: need {n} more bytes")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| self.error("length overflow"))?;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let raw = self.bytes()?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error("invalid utf-8 string"))
    }

    pub fn matrix_f64(&mut self) -> Result<Array2<f64>> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| self.error("matrix size overflow"))?;
        if n.saturating_mul(8) > self.remaining() {
            return Err(self.error(format!("truncated {rows}x{cols} matrix")));
        }
        let values = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_vec((rows, cols), values).expect("length matches"))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.error(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A single-channel recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalFile {
    pub sample_rate: f64,
    pub samples: Vec<f32>,
}

impl SignalFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.header(SIGNAL_MAGIC, SIGNAL_VERSION);
        e.f64(self.sample_rate);
        e.u64(self.samples.len() as u64);
        e.buf.reserve(self.samples.len() * 4);
        for &s in &self.samples {
            e.f32(s);
        }
        e.buf
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut d = Decoder::new(bytes, context);
        d.header(SIGNAL_MAGIC, SIGNAL_VERSION, "signal file")?;
        let sample_rate = d.f64()?;
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(d.error(format!("invalid sample rate {sample_rate}")));
        }
        let n = d.u64()? as usize;
        if n.saturating_mul(4) != d.remaining() {
            return Err(d.error(format!("header declares {n} samples, payload holds {} bytes", d.remaining())));
        }
        let samples = (0..n).map(|_| d.f32()).collect::<Result<Vec<_>>>()?;
        Ok(Self { sample_rate, samples })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, &path.display().to_string())
    }
}

/// Writes one token per line.
pub fn write_labels(path: &Path, tokens: &[&str]) -> Result<()> {
    let mut text = tokens.join("\n");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Reads a label file; blank lines are skipped.
pub fn read_labels(path: &Path) -> Result<RawLabelStream> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RawLabelStream::parse(text.lines().filter(|l| !l.trim().is_empty()))
}

/// One manifest row. Relative paths resolve against the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub recording_id: String,
    pub signal_path: PathBuf,
    pub label_path: PathBuf,
    pub in_bed_start: usize,
    pub in_bed_end: usize,
    pub subject_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format(path.display().to_string(), format!("{other:?}")),
        })?;
        let rows = reader.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base_dir, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        write_atomic(path, &bytes)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Options for turning a manifest row into features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepareOptions {
    pub stft: StftParams,
    pub margin_minutes: f64,
    pub zscore: bool,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self { stft: StftParams::default(), margin_minutes: 30.0, zscore: false }
    }
}

/// Spectrogram images and hypnogram of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecording {
    pub recording_id: String,
    pub subject_id: String,
    /// Index of the first retained epoch in the original recording.
    pub first_epoch: usize,
    /// `[epochs, frames, bins]`.
    pub images: Array3<f32>,
    pub hypnogram: Hypnogram,
}

impl FeatureRecording {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, epoch: usize) -> ArrayView2<'_, f32> {
        self.images.index_axis(ndarray::Axis(0), epoch)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, t, f) = self.images.dim();
        let mut e = Encoder::new();
        e.header(FEATURE_MAGIC, FEATURE_VERSION);
        e.str(&self.recording_id);
        e.str(&self.subject_id);
        e.u64(self.first_epoch as u64);
        e.u64(n as u64);
        e.u32(t as u32);
        e.u32(f as u32);
        for (&s, &m) in self.hypnogram.stages.iter().zip(&self.hypnogram.valid_mask) {
            e.u8(s as u8);
            e.u8(m as u8);
        }
        e.buf.reserve(n * t * f * 4);
        for &v in self.images.iter() {
            e.f32(v);
        }
        e.buf
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut d = Decoder::new(bytes, context);
        d.header(FEATURE_MAGIC, FEATURE_VERSION, "feature archive")?;
        let recording_id = d.str()?;
        let subject_id = d.str()?;
        let first_epoch = d.u64()? as usize;
        let n = d.u64()? as usize;
        let t = d.u32()? as usize;
        let f = d.u32()? as usize;
        let expected = n.checked_mul(2 + t * f * 4).ok_or_else(|| d.error("size overflow"))?;
        if expected != d.remaining() {
            return Err(d.error(format!("payload holds {} bytes, expected {expected}", d.remaining())));
        }
        let mut stages = Vec::with_capacity(n);
        let mut valid_mask = Vec::with_capacity(n);
        for i in 0..n {
            let code = d.u8()?;
            let stage = Stage::from_index(code as usize).ok_or_else(|| d.error(format!("bad stage code {code} at epoch {i}")))?;
            stages.push(stage);
            valid_mask.push(match d.u8()? {
                0 => false,
                1 => true,
                other => return Err(d.error(format!("bad mask byte {other} at epoch {i}"))),
            });
        }
        let values = (0..n * t * f).map(|_| d.f32()).collect::<Result<Vec<_>>>()?;
        let images = Array3::from_shape_vec((n, t, f), values).expect("length matches");
        let hypnogram = Hypnogram { recording_id: recording_id.clone(), stages, valid_mask };
        Ok(Self { recording_id, subject_id, first_epoch, images, hypnogram })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, &path.display().to_string())
    }
}

/// Reads signal and labels of a manifest row, resamples to the canonical
/// rate, harmonizes and trims the labels, and computes one image per
/// retained epoch.
pub fn prepare_recording(manifest: &Manifest, row: &ManifestRow, options: &PrepareOptions) -> Result<FeatureRecording> {
    let signal = SignalFile::read(&manifest.resolve(&row.signal_path))?;
    let raw = read_labels(&manifest.resolve(&row.label_path))?;
    let samples: Vec<f64> = signal.samples.iter().map(|&v| v as f64).collect();
    let samples = if signal.sample_rate != CANONICAL_SAMPLE_RATE {
        resample(&samples, signal.sample_rate, CANONICAL_SAMPLE_RATE)?
    } else {
        samples
    };
    let per_epoch = (CANONICAL_SAMPLE_RATE * EPOCH_SECONDS) as usize;
    let signal_epochs = samples.len() / per_epoch;
    if signal_epochs != raw.labels.len() {
        log::warn!(
            "{}: signal holds {signal_epochs} epochs, label file {}; using the shorter",
            row.recording_id,
            raw.labels.len()
        );
    }
    let epochs = signal_epochs.min(raw.labels.len());
    if epochs == 0 {
        return Err(Error::InvalidEpoch(format!("{}: recording holds no complete epoch", row.recording_id)));
    }
    let mut hyp = harmonize_labels(&raw, &row.recording_id);
    hyp.stages.truncate(epochs);
    hyp.valid_mask.truncate(epochs);
    let trimmed = trim_to_in_bed(&hyp, row.in_bed_start, row.in_bed_end.min(epochs - 1), options.margin_minutes)?;
    let spectrogram = Spectrogram::new(options.stft, CANONICAL_SAMPLE_RATE)?;
    let mut images: Vec<TimeFreqImage> = trimmed
        .range
        .clone()
        .map(|e| spectrogram.transform(&samples[e * per_epoch..(e + 1) * per_epoch]))
        .collect::<Result<_>>()?;
    if options.zscore {
        zscore_recording(&mut images);
    }
    let (t, f) = images[0].values.dim();
    let mut out = Array3::<f32>::zeros((images.len(), t, f));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(&img.values.mapv(|v| v as f32));
    }
    Ok(FeatureRecording {
        recording_id: row.recording_id.clone(),
        subject_id: row.subject_id.clone(),
        first_epoch: *trimmed.range.start(),
        images: out,
        hypnogram: trimmed.hypnogram,
    })
}

/// Loads every `*.lsqf` archive of a directory, sorted by file name.
pub fn read_feature_dir(dir: &Path) -> Result<Vec<FeatureRecording>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == FEATURE_EXTENSION))
        .collect();
    paths.sort();
    paths.iter().map(|p| FeatureRecording::read(p)).collect()
}

pub const FEATURE_EXTENSION: &str = "lsqf";
