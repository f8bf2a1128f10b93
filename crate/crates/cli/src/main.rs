use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lseq_cli::runs::{default_run_name, run_dir, RUN_ROOT_ENV};
use lseq_cli::train::{Start, TrainRequest};
use lseq_cli::{benchmark, evaluate, predict, prepare, synth, train};
use lseq_core::evaluation::Protocol;
use lseq_core::scaling::{default_grid, parse_grid};
use lseq_core::train::InitMode;
use lseq_core::{ModelConfig, RunConfig, Variant};

#[derive(Parser)]
#[command(name = "lseq", version, about = "Long-context sleep staging pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run configuration file plus `section.key=value` overrides.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration with model, train, data and eval sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `train.learning_rate=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> Result<RunConfig> {
        let mut all = self.overrides.clone();
        all.extend_from_slice(extra);
        RunConfig::load(self.config.as_deref(), &all).context("resolving run configuration")
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    Synth {
        /// Size preset: tiny or small.
        #[arg(long, default_value = "tiny")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML generator settings layered over the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Compute spectrogram feature archives for every manifest row.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Train a folded or flat model into a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or cross-validate with one training run per fold.
    Evaluate(EvaluateArgs),
    /// Time training steps across sequence lengths and fold shapes.
    Benchmark {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated `flat:L` and `folded:BxK` entries.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        minibatch: usize,
        /// Use the small numerical-check widths instead of the configured model.
        #[arg(long)]
        miniature: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-epoch predictions and posteriors for feature archives.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A feature archive or a directory of them.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Window stride; 0 uses the sequence length.
        #[arg(long, default_value_t = 0)]
        stride: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory of feature archives (overrides data.features).
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, value_parser = ["folded", "flat"])]
    variant: Option<String>,
    /// Sequence length in epochs.
    #[arg(long = "L", visible_alias = "seq-len")]
    seq_len: Option<usize>,
    /// Fold shape of the folded model, as BxK.
    #[arg(long)]
    fold: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Hard step budget (overrides train.max_steps).
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Explicit run directory; otherwise one is named under the run root.
    #[arg(long, conflicts_with = "name")]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long, env = RUN_ROOT_ENV, default_value = "runs")]
    run_root: PathBuf,
    /// Initialize from a pretrained checkpoint.
    #[arg(long, conflicts_with = "resume")]
    init_from: Option<PathBuf>,
    /// `all` requires every tensor to match; `compatible` keeps mismatched ones fresh.
    #[arg(long, default_value = "all")]
    init_mode: String,
    /// Continue from a `last.ckpt` with its optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

impl TrainArgs {
    /// Shortcut flags as overrides, applied after `--set`.
    fn overrides(&self) -> Result<Vec<String>> {
        let mut o = Vec::new();
        if let Some(f) = &self.features {
            o.push(format!("data.features={}", toml::Value::String(f.display().to_string())));
        }
        if let Some(v) = &self.variant {
            o.push(format!("model.variant=\"{v}\""));
        }
        if let Some(l) = self.seq_len {
            o.push(format!("model.seq_len={l}"));
        }
        match (&self.fold, self.variant.as_deref(), self.seq_len) {
            (Some(fold), _, _) => {
                let (b, k) = fold.split_once('x').context("--fold expects BxK")?;
                let (b, k): (usize, usize) = (b.parse().context("--fold B")?, k.parse().context("--fold K")?);
                o.push(format!("model.fold_b={b}"));
                o.push(format!("model.fold_k={k}"));
            }
            (None, Some("flat"), Some(l)) => {
                o.push("model.fold_b=1".into());
                o.push(format!("model.fold_k={l}"));
            }
            _ => {}
        }
        if let Some(s) = self.seed {
            o.push(format!("train.seed={s}"));
        }
        if let Some(s) = self.steps {
            o.push(format!("train.max_steps={s}"));
        }
        if let Some(w) = self.workers {
            o.push(format!("train.workers={w}"));
        }
        Ok(o)
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Score this checkpoint instead of training per fold.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Restrict checkpoint scoring to these subjects.
    #[arg(long = "subject")]
    subjects: Vec<String>,
    #[arg(long, value_parser = ["loso", "split"])]
    protocol: Option<String>,
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Window stride at test time; 0 uses the sequence length.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { preset, seed, config, overrides, out, workers } => {
            let cfg = synth::resolve_synth_config(&preset, seed, config.as_deref(), &overrides)?;
            let manifest = synth::synthesize(&cfg, &out, workers)?;
            println!("wrote {} recordings and {}", manifest.rows.len(), out.join("manifest.csv").display());
        }
        Command::Prepare { manifest, out, config, workers } => {
            let cfg = config.load(&[])?;
            let summary = prepare::prepare(&manifest, &out, &cfg.data.prepare, workers)?;
            let failed = summary.failures();
            println!("prepared {} of {} recordings; summary in {}", summary.rows.len() - failed, summary.rows.len(), summary.summary_path.display());
            if failed > 0 {
                bail!("{failed} recording(s) failed; see {}", summary.summary_path.display());
            }
        }
        Command::Train(args) => {
            let cfg = args.config.load(&args.overrides()?)?;
            let name = args.name.clone().unwrap_or_else(|| default_run_name(&cfg));
            let dir = run_dir(args.run_dir.clone(), &args.run_root, &name);
            let start = match (&args.init_from, &args.resume) {
                (Some(ck), _) => Start::Pretrained { checkpoint: ck.clone(), mode: args.init_mode.parse::<InitMode>()? },
                (None, Some(ck)) => Start::Resume { checkpoint: ck.clone() },
                (None, None) => Start::Fresh,
            };
            let summary = train::run(&TrainRequest { config: cfg, run_dir: dir, start })?;
            println!(
                "best validation accuracy {:.4} at step {} of {}; run directory {}",
                summary.best_accuracy,
                summary.best_step,
                summary.steps,
                summary.run_dir.display()
            );
        }
        Command::Evaluate(args) => {
            let mut extra = Vec::new();
            if let Some(f) = &args.features {
                extra.push(format!("data.features={}", toml::Value::String(f.display().to_string())));
            }
            if let Some(w) = args.workers {
                extra.push(format!("train.workers={w}"));
            }
            if let Some(s) = args.stride {
                extra.push(format!("eval.stride={s}"));
            }
            if let Some(r) = args.repetitions {
                extra.push(format!("eval.repetitions={r}"));
            }
            let mut cfg = args.config.load(&extra)?;
            match args.protocol.as_deref() {
                Some("loso") => cfg.eval.protocol = Protocol::Loso,
                Some(_) => cfg.eval.protocol = Protocol::Split { train_fraction: args.train_fraction },
                None => {}
            }
            match &args.checkpoint {
                Some(ck) => {
                    let report = evaluate::evaluate_checkpoint(
                        ck,
                        &cfg.data.features,
                        &args.subjects,
                        cfg.eval.stride,
                        cfg.eval.batch_size,
                        cfg.train.workers,
                        &args.out,
                    )?;
                    print!("{}", report.table());
                }
                None => {
                    let cv = evaluate::cross_validate_runs(&cfg, &args.out)?;
                    println!("{} fold reports written to {}", cv.folds.len(), args.out.display());
                    print!("{}", cv.aggregate.mean.table());
                }
            }
        }
        Command::Benchmark { config, grid, steps, minibatch, miniature, out } => {
            let cfg = config.load(&[])?;
            let base = if miniature { ModelConfig { variant: Variant::Folded, ..ModelConfig::miniature() } } else { cfg.model.clone() };
            let grid = match grid {
                Some(spec) => parse_grid(&spec)?,
                None => default_grid(),
            };
            let rows = benchmark::benchmark(&base, &cfg.train, &grid, steps, minibatch, &out)?;
            println!("{} rows written to {}", rows.len(), out.join("scaling.csv").display());
        }
        Command::Predict { checkpoint, features, out, stride, batch_size } => {
            let written = predict::predict(&checkpoint, &features, stride, batch_size, &out)?;
            println!("wrote {} prediction file(s) to {}", written.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
