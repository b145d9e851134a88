use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use vgsleep_core::nn::Block;
use vgsleep_core::pipeline::{
    self, discover_recordings, EvalOn, PipelineConfig, Preset, Recording, TrainOptions, SWEEP_BATCH_SIZES,
};

/// EEG sleep staging from visibility-graph layout images.
#[derive(Parser, Debug)]
#[command(name = "vgsleep", version)]
struct Cli {
    /// JSON pipeline config; command-line flags override its keys.
    #[arg(long, global = true, env = "VGSLEEP_CONFIG")]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Dataset preset: edfx, hmc, nch or custom.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    channel: Option<String>,
    #[arg(long, global = true)]
    epoch_seconds: Option<f64>,
    #[arg(long, global = true)]
    resample_hz: Option<f64>,
    #[arg(long, global = true)]
    crop_seconds: Option<f64>,
    /// Worker threads for conversion; defaults to all logical cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Sets the layout, sampler and training seeds together.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    patience: Option<usize>,
    #[arg(long, global = true)]
    k_neighbors: Option<usize>,
    #[arg(long, global = true)]
    split_ratio: Option<f64>,
    #[arg(long, global = true)]
    folds: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(p) = self.preset {
            cfg.preset = p;
        }
        if let Some(c) = &self.channel {
            cfg.channel = Some(c.clone());
        }
        if let Some(v) = self.epoch_seconds {
            cfg.epoch_s = v;
        }
        if self.resample_hz.is_some() {
            cfg.resample_hz = self.resample_hz;
        }
        if self.crop_seconds.is_some() {
            cfg.crop_s = self.crop_seconds;
        }
        if self.jobs.is_some() {
            cfg.jobs = self.jobs;
        }
        if let Some(s) = self.seed {
            cfg.layout.seed = s;
            cfg.sampler.seed = s;
            cfg.train.seed = s;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.patience {
            cfg.train.patience = v;
        }
        if let Some(v) = self.k_neighbors {
            cfg.sampler.k_neighbors = v;
        }
        if let Some(v) = self.split_ratio {
            cfg.sampler.split_ratio = v;
        }
        if let Some(v) = self.folds {
            cfg.sampler.folds = v;
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// EDF recordings -> layout images and labels.csv.
    Convert {
        /// Directory of PSG + hypnogram files, or individual signal EDFs.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Oversample minority classes of an image manifest.
    Balance {
        manifest: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train on a manifest (80:20 holdout unless --kfold).
    Train {
        manifest: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        kfold: bool,
        /// Split the manifest with its synthetic rows instead of balancing the training part only.
        #[arg(long, alias = "paper-faithful")]
        balance_before_split: bool,
    },
    /// Score a checkpoint against a manifest and print the report.
    Evaluate {
        checkpoint: PathBuf,
        manifest: PathBuf,
        #[arg(long, default_value = "original")]
        eval_on: EvalOn,
        /// Also write report.json and confusion.csv here.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Classify one PGM image.
    Predict { checkpoint: PathBuf, image: PathBuf },
    /// Dump one block's weights (LSFE, S2TLR or G2A) as CSV.
    ExportWeights {
        checkpoint: PathBuf,
        #[arg(long)]
        tag: Block,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Holdout training once per batch size.
    Sweep {
        manifest: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_BATCH_SIZES)]
        batch_sizes: Vec<usize>,
        #[arg(long, alias = "paper-faithful")]
        balance_before_split: bool,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn recordings(inputs: &[PathBuf]) -> anyhow::Result<Vec<Recording>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(discover_recordings(p)?);
        } else if p.is_file() {
            out.push(Recording::new(p.clone(), None));
        } else {
            bail!("input {} does not exist", p.display());
        }
    }
    if out.is_empty() {
        bail!("no signal recordings found");
    }
    Ok(out)
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Convert { inputs, out } => {
            let s = pipeline::cmd_convert(&cfg, &recordings(&inputs)?, &out)?;
            println!("images={} failures={} manifest={}", s.manifest.rows.len(), s.failures.len(), manifest_path(&out));
        }
        Command::Balance { manifest, out } => {
            let s = pipeline::cmd_balance(&manifest, &cfg, &out)?;
            println!("rows={} synthetic={} manifest={}", s.manifest.rows.len(), s.synthetic, manifest_path(&out));
        }
        Command::Train { manifest, out, kfold, balance_before_split } => {
            let s = pipeline::cmd_train(&manifest, &cfg, &out, TrainOptions { kfold, balance_before_split })?;
            for f in &s.folds {
                println!(
                    "dir={} best_epoch={} epochs_run={} val_accuracy={:.4}",
                    f.dir.display(),
                    f.best_epoch,
                    f.epochs_run,
                    f.report.accuracy
                );
            }
            if kfold {
                println!("mean_accuracy={:.4}", s.mean_accuracy());
            }
        }
        Command::Evaluate { checkpoint, manifest, eval_on, out } => {
            let report = pipeline::cmd_evaluate(&checkpoint, &manifest, eval_on, out.as_deref())?;
            print_json(&report)?;
        }
        Command::Predict { checkpoint, image } => {
            print_json(&pipeline::cmd_predict(&checkpoint, &image)?)?;
        }
        Command::ExportWeights { checkpoint, tag, out } => {
            let n = pipeline::cmd_export_weights(&checkpoint, &tag.to_string(), &out)?;
            println!("rows={n} out={}", out.display());
        }
        Command::Sweep { manifest, out, batch_sizes, balance_before_split } => {
            let rows = pipeline::cmd_sweep(&manifest, &cfg, &out, &batch_sizes, TrainOptions { kfold: false, balance_before_split })?;
            for r in rows {
                println!("batch_size={} accuracy={:.4} kappa={:.4}", r.batch_size, r.report.accuracy, r.report.kappa);
            }
        }
    }
    Ok(())
}

fn manifest_path(dir: &Path) -> String {
    dir.join(pipeline::MANIFEST_FILE).display().to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("event=failed error={e:#}");
            ExitCode::FAILURE
        }
    }
}
