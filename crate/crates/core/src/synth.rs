//! Synthetic sleep recordings with a whole-cycle dependency.
//!
//! Stages follow a Markov chain. With probability `cycle_modulation_depth`
//! each draw is rewritten by a rule that depends on the position within a
//! cycle of `cycle_period` epochs:
//!
//! * the first `marker_fraction` of every cycle is deep sleep (N3), and N3
//!   occurs nowhere else (it becomes N2);
//! * N1 and REM form a confusable pair: identical signal bands and mirrored
//!   transition rows. A pair draw becomes N1 before `pair_split` of the cycle
//!   and REM after it;
//! * pair draws within `guard_epochs` of a marker block become N2.
//!
//! Telling N1 from REM therefore needs the distance to the last marker block,
//! which is up to a whole cycle away.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{write_labels, Manifest, ManifestRow, SignalFile};
use crate::frontend::{Hypnogram, RawLabel, Stage, EPOCH_SECONDS, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tone {
    pub frequency_hz: f64,
    pub amplitude: f64,
}

/// Sinusoidal components characteristic of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageBand {
    pub tones: Vec<Tone>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub recordings_per_subject: usize,
    pub epochs_per_recording: usize,
    /// Row-stochastic base transition matrix over W, N1, N2, N3, REM.
    pub transition: [[f64; NUM_CLASSES]; NUM_CLASSES],
    pub cycle_period: usize,
    pub cycle_modulation_depth: f64,
    pub marker_fraction: f64,
    pub pair_split: f64,
    pub guard_epochs: usize,
    /// One band per stage, in stage order.
    pub bands: Vec<StageBand>,
    /// Uniform jitter of every tone frequency, per epoch.
    pub frequency_jitter_hz: f64,
    /// Relative uniform jitter of every tone amplitude, per epoch.
    pub amplitude_jitter: f64,
    /// Standard deviation of additive white noise.
    pub noise_level: f64,
    /// Every subject scales all tone frequencies by `1 + u`, with `u` uniform
    /// in `[-subject_variability, subject_variability]`. Zero makes subjects
    /// statistically identical.
    pub subject_variability: f64,
    pub sample_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let band = |tones: &[(f64, f64)]| StageBand {
            tones: tones.iter().map(|&(frequency_hz, amplitude)| Tone { frequency_hz, amplitude }).collect(),
        };
        let pair = band(&[(6.0, 1.0), (18.0, 0.25)]);
        Self {
            n_subjects: 6,
            recordings_per_subject: 2,
            epochs_per_recording: 600,
            transition: [
                [0.80, 0.06, 0.08, 0.00, 0.06],
                [0.05, 0.70, 0.15, 0.00, 0.10],
                [0.04, 0.08, 0.76, 0.04, 0.08],
                [0.00, 0.00, 0.15, 0.85, 0.00],
                [0.05, 0.10, 0.15, 0.00, 0.70],
            ],
            cycle_period: 180,
            cycle_modulation_depth: 1.0,
            marker_fraction: 0.1,
            pair_split: 0.55,
            guard_epochs: 6,
            bands: vec![
                band(&[(10.0, 1.0), (22.0, 0.3)]),
                pair.clone(),
                band(&[(13.0, 1.0), (4.0, 0.8)]),
                band(&[(1.5, 3.0)]),
                pair,
            ],
            frequency_jitter_hz: 0.3,
            amplitude_jitter: 0.2,
            noise_level: 0.5,
            subject_variability: 0.0,
            sample_rate: 100.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// 6 subjects × 2 recordings × 600 epochs.
    pub fn tiny(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    /// 20 subjects × 2 recordings × 1000 epochs.
    pub fn small(seed: u64) -> Self {
        Self { n_subjects: 20, epochs_per_recording: 1000, seed, ..Self::default() }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(seed)),
            "small" => Ok(Self::small(seed)),
            other => Err(Error::Config(format!("unknown synthetic preset {other:?} (expected tiny or small)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cycle_period == 0 {
            return Err(Error::Config("cycle_period must be positive".into()));
        }
        if self.n_subjects == 0 || self.recordings_per_subject == 0 || self.epochs_per_recording == 0 {
            return Err(Error::Config("subject, recording and epoch counts must be positive".into()));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("transition row {i} is not a probability vector")));
            }
        }
        if !(0.0..=1.0).contains(&self.cycle_modulation_depth) {
            return Err(Error::Config("cycle_modulation_depth must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.marker_fraction) || !(self.marker_fraction < self.pair_split && self.pair_split < 1.0) {
            return Err(Error::Config("need 0 <= marker_fraction < pair_split < 1".into()));
        }
        if self.bands.len() != NUM_CLASSES {
            return Err(Error::Config(format!("expected {NUM_CLASSES} stage bands, got {}", self.bands.len())));
        }
        if !(self.noise_level >= 0.0 && self.frequency_jitter_hz >= 0.0 && self.amplitude_jitter >= 0.0) {
            return Err(Error::Config("noise and jitter levels must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.subject_variability) {
            return Err(Error::Config("subject_variability must lie in [0, 1)".into()));
        }
        if !(self.sample_rate > 0.0) || (self.sample_rate * EPOCH_SECONDS).fract() != 0.0 {
            return Err(Error::Config(format!("sample rate {} gives a fractional epoch length", self.sample_rate)));
        }
        Ok(())
    }

    /// The configuration with subject `subject`'s frequency scaling applied.
    pub fn for_subject(&self, subject: usize) -> Self {
        if self.subject_variability == 0.0 {
            return self.clone();
        }
        // a stream past every recording's substreams
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX - subject as u64);
        let scale = 1.0 + rng.gen_range(-self.subject_variability..=self.subject_variability);
        let mut cfg = self.clone();
        for tone in cfg.bands.iter_mut().flat_map(|b| b.tones.iter_mut()) {
            tone.frequency_hz *= scale;
        }
        cfg
    }

    fn marker_len(&self) -> usize {
        (self.marker_fraction * self.cycle_period as f64).ceil() as usize
    }

    /// Stage forced by the cycle rule for a draw at cycle position `pos`.
    pub fn phase_rule(&self, drawn: Stage, pos: usize) -> Stage {
        let period = self.cycle_period;
        let marker = self.marker_len();
        if pos < marker {
            return Stage::N3;
        }
        match drawn {
            Stage::N3 => Stage::N2,
            Stage::N1 | Stage::Rem => {
                if pos < marker + self.guard_epochs || pos + self.guard_epochs >= period {
                    Stage::N2
                } else if (pos as f64) < self.pair_split * period as f64 {
                    Stage::N1
                } else {
                    Stage::Rem
                }
            }
            other => other,
        }
    }

    /// Stage the cycle rule assigns to a confusable-pair epoch at `pos`.
    pub fn pair_stage_at(&self, pos: usize) -> Stage {
        if (pos as f64) < self.pair_split * self.cycle_period as f64 {
            Stage::N1
        } else {
            Stage::Rem
        }
    }
}

/// Hypnogram plus the cycle position of every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthHypnogram {
    pub hypnogram: Hypnogram,
    /// Position within the cycle, `0..cycle_period`.
    pub cycle_position: Vec<usize>,
}

/// Independent generators for the parts of one recording.
pub struct Substreams {
    pub hypnogram: ChaCha8Rng,
    pub signal: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

impl Substreams {
    pub fn new(seed: u64, recording: usize) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(recording as u64 * 3 + k);
            r
        };
        Self { hypnogram: stream(0), signal: stream(1), noise: stream(2) }
    }
}

pub fn generate_hypnogram<R: Rng>(config: &SynthConfig, recording_id: &str, rng: &mut R) -> Result<SynthHypnogram> {
    config.validate()?;
    let rows: Vec<WeightedIndex<f64>> = config
        .transition
        .iter()
        .map(|row| WeightedIndex::new(row).map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<_>>()?;
    let period = config.cycle_period;
    let offset = rng.gen_range(0..period);
    let mut prev = Stage::W;
    let mut stages = Vec::with_capacity(config.epochs_per_recording);
    let mut cycle_position = Vec::with_capacity(config.epochs_per_recording);
    for t in 0..config.epochs_per_recording {
        let pos = (t + offset) % period;
        let drawn = Stage::from_index(rows[prev.index()].sample(rng)).expect("class index");
        let modulate = rng.gen::<f64>() < config.cycle_modulation_depth;
        let stage = if modulate { config.phase_rule(drawn, pos) } else { drawn };
        stages.push(stage);
        cycle_position.push(pos);
        prev = stage;
    }
    Ok(SynthHypnogram { hypnogram: Hypnogram::from_stages(recording_id, stages), cycle_position })
}

/// Samples of every epoch, concatenated.
pub fn generate_signal(hyp: &Hypnogram, config: &SynthConfig, signal_rng: &mut ChaCha8Rng, noise_rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    config.validate()?;
    let fs = config.sample_rate;
    let per_epoch = (fs * EPOCH_SECONDS) as usize;
    let mut out = Vec::with_capacity(hyp.len() * per_epoch);
    let mut buf = vec![0.0f64; per_epoch];
    for &stage in &hyp.stages {
        buf.iter_mut().for_each(|v| *v = 0.0);
        for tone in &config.bands[stage.index()].tones {
            let jf = if config.frequency_jitter_hz > 0.0 {
                signal_rng.gen_range(-config.frequency_jitter_hz..=config.frequency_jitter_hz)
            } else {
                0.0
            };
            let ja = if config.amplitude_jitter > 0.0 {
                signal_rng.gen_range(-config.amplitude_jitter..=config.amplitude_jitter)
            } else {
                0.0
            };
            let phase = signal_rng.gen_range(0.0..2.0 * PI);
            let w = 2.0 * PI * (tone.frequency_hz + jf) / fs;
            let a = tone.amplitude * (1.0 + ja);
            for (n, v) in buf.iter_mut().enumerate() {
                *v += a * (w * n as f64 + phase).sin();
            }
        }
        for v in buf.iter_mut() {
            let z: f64 = StandardNormal.sample(noise_rng);
            *v += config.noise_level * z;
            out.push(*v as f32);
        }
    }
    Ok(out)
}

/// One generated recording in memory.
#[derive(Debug, Clone)]
pub struct SynthRecording {
    pub recording_id: String,
    pub subject_id: String,
    pub hypnogram: SynthHypnogram,
    pub signal: Vec<f32>,
}

pub fn recording_ids(config: &SynthConfig) -> Vec<(String, String)> {
    (0..config.n_subjects)
        .flat_map(|s| {
            (0..config.recordings_per_subject).map(move |r| (format!("sub{s:02}_rec{r}"), format!("sub{s:02}")))
        })
        .collect()
}

/// Generates recording `index` of the dataset (subject-major order).
pub fn generate_recording(config: &SynthConfig, index: usize) -> Result<SynthRecording> {
    let (recording_id, subject_id) = recording_ids(config)
        .into_iter()
        .nth(index)
        .ok_or_else(|| Error::Config(format!("recording index {index} out of range")))?;
    let mut streams = Substreams::new(config.seed, index);
    let hypnogram = generate_hypnogram(config, &recording_id, &mut streams.hypnogram)?;
    let subject = config.for_subject(index / config.recordings_per_subject);
    let signal = generate_signal(&hypnogram.hypnogram, &subject, &mut streams.signal, &mut streams.noise)?;
    Ok(SynthRecording { recording_id, subject_id, hypnogram, signal })
}

/// Writes signal and label files plus `manifest.csv` into `out_dir`.
/// Recordings are generated on up to `workers` threads.
pub fn write_dataset(config: &SynthConfig, out_dir: &Path, workers: usize) -> Result<Manifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let count = config.n_subjects * config.recordings_per_subject;
    let write_one = |index: usize| -> Result<ManifestRow> {
        let rec = generate_recording(config, index)?;
        let signal_path = format!("{}.sig", rec.recording_id);
        let label_path = format!("{}.txt", rec.recording_id);
        SignalFile { sample_rate: config.sample_rate, samples: rec.signal }.write(&out_dir.join(&signal_path))?;
        let tokens: Vec<&str> = rec.hypnogram.hypnogram.stages.iter().map(|&s| RawLabel::from(s).token()).collect();
        write_labels(&out_dir.join(&label_path), &tokens)?;
        Ok(ManifestRow {
            recording_id: rec.recording_id,
            signal_path: signal_path.into(),
            label_path: label_path.into(),
            in_bed_start: 0,
            in_bed_end: config.epochs_per_recording - 1,
            subject_id: rec.subject_id,
        })
    };
    let workers = workers.clamp(1, count);
    let rows: Vec<ManifestRow> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| s.spawn(move || (w..count).step_by(workers).map(|i| Ok((i, write_one(i)?))).collect::<Result<Vec<_>>>()))
            .collect();
        let mut all = Vec::with_capacity(count);
        for h in handles {
            all.extend(h.join().expect("generator thread panicked")?);
        }
        all.sort_by_key(|(i, _)| *i);
        Ok::<_, Error>(all.into_iter().map(|(_, r)| r).collect())
    })?;
    let manifest = Manifest { base_dir: out_dir.to_path_buf(), rows };
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
pub fn stationary(transition: &[[f64; NUM_CLASSES]; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let mut p = [1.0 / NUM_CLASSES as f64; NUM_CLASSES];
    for _ in 0..10_000 {
        let mut next = [0.0; NUM_CLASSES];
        for i in 0..NUM_CLASSES {
            for j in 0..NUM_CLASSES {
                next[j] += p[i] * transition[i][j];
            }
        }
        p = next;
    }
    p
}

/// Accuracy on confusable-pair epochs of the best predictor that sees only
/// disjoint windows of `window` epochs: certain when the window contains a
/// marker epoch, a coin flip otherwise.
pub fn windowed_pair_bound(hyp: &SynthHypnogram, window: usize) -> Option<f64> {
    let stages = &hyp.hypnogram.stages;
    let mut pair = 0usize;
    let mut resolvable = 0usize;
    for chunk_start in (0..stages.len()).step_by(window) {
        let chunk = &stages[chunk_start..(chunk_start + window).min(stages.len())];
        let has_marker = chunk.contains(&Stage::N3);
        for &s in chunk {
            if matches!(s, Stage::N1 | Stage::Rem) {
                pair += 1;
                resolvable += has_marker as usize;
            }
        }
    }
    (pair > 0).then(|| 0.5 + 0.5 * resolvable as f64 / pair as f64)
}
