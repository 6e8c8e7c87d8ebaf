//! Command-line front end: flag and config resolution, dispatch and exit codes.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// Invalid flags or configuration; exits with status 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(
    name = "mtslof",
    version,
    about = "Occlusion-invariant self-supervised representation learning for multivariate time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Write a labeled synthetic dataset to --out.
    GenData,
    /// Self-supervised pretraining; writes seed-<s>.ckpt and seed-<s>.csv under --out.
    Pretrain,
    /// Linear probe on frozen representations of --checkpoint.
    Probe,
    /// Supervised fine-tuning of every parameter on --fraction of the training labels.
    Finetune,
    /// Score a checkpoint with a trained head on --split.
    Eval,
    /// Write pooled representations of every sample to --out as CSV.
    ExportEmbeddings,
    /// Pretrain and probe over the --num-masks x --mask-ratio grid.
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::Probe => "probe",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::ExportEmbeddings => "export-embeddings",
            Command::Ablate => "ablate",
        }
    }
}

/// Flags shared by every command. Each maps onto the config key of the same name.
#[derive(Args, Debug, Default, Clone)]
pub struct Flags {
    /// key=value config file applied over the defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Dataset file.
    #[arg(long, global = true, value_name = "FILE")]
    pub data: Option<String>,
    /// Checkpoint file, or a directory holding seed-<s>.ckpt files.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<String>,
    /// Output file or directory.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<String>,
    /// Comma list of seeds (gen-data: the single data seed).
    #[arg(long, global = true, value_name = "LIST")]
    pub seed: Option<String>,
    #[arg(long, global = true)]
    pub epochs: Option<String>,
    #[arg(long, global = true)]
    pub batch_size: Option<String>,
    #[arg(long, global = true)]
    pub lr: Option<String>,
    #[arg(long, global = true)]
    pub weight_decay: Option<String>,
    /// Fraction of patches hidden per mask (comma list for ablate).
    #[arg(long, global = true, value_name = "LIST")]
    pub mask_ratio: Option<String>,
    /// Masks per sample (comma list for ablate).
    #[arg(long, global = true, value_name = "LIST")]
    pub num_masks: Option<String>,
    /// Balance weight between similarity and coding rate.
    #[arg(long, global = true)]
    pub lambda: Option<String>,
    /// Coding-rate distortion.
    #[arg(long, global = true)]
    pub epsilon: Option<String>,
    #[arg(long, global = true)]
    pub d_model: Option<String>,
    #[arg(long, global = true)]
    pub heads: Option<String>,
    #[arg(long, global = true)]
    pub depth: Option<String>,
    /// Labeled fraction of the training split for finetune.
    #[arg(long, global = true)]
    pub fraction: Option<String>,
    #[arg(long, global = true)]
    pub classes: Option<String>,
    #[arg(long, global = true)]
    pub channels: Option<String>,
    #[arg(long, global = true)]
    pub length: Option<String>,
    #[arg(long, global = true)]
    pub samples_per_class: Option<String>,
    #[arg(long, global = true)]
    pub noise_std: Option<String>,
    /// Split scored by eval: train, val, test or all.
    #[arg(long, global = true)]
    pub split: Option<String>,
}

impl Flags {
    fn pairs(&self) -> [(&'static str, &Option<String>); 22] {
        [
            ("data", &self.data),
            ("checkpoint", &self.checkpoint),
            ("out", &self.out),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("weight_decay", &self.weight_decay),
            ("mask_ratio", &self.mask_ratio),
            ("num_masks", &self.num_masks),
            ("lambda", &self.lambda),
            ("epsilon", &self.epsilon),
            ("d_model", &self.d_model),
            ("heads", &self.heads),
            ("depth", &self.depth),
            ("fraction", &self.fraction),
            ("classes", &self.classes),
            ("channels", &self.channels),
            ("length", &self.length),
            ("samples_per_class", &self.samples_per_class),
            ("noise_std", &self.noise_std),
            ("split", &self.split),
        ]
    }
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
pub fn resolve(command: Command, flags: &Flags) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_file(&text, &path.display().to_string())?;
    }
    for kv in &flags.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    for (key, value) in flags.pairs() {
        let Some(v) = value else { continue };
        let key = if command == Command::GenData && key == "seed" {
            "data_seed"
        } else {
            key
        };
        cfg.set(key, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli.command, &cli.flags)?;
    println!("# {} resolved config", cli.command.name());
    for line in cfg.echo().lines() {
        println!("#   {line}");
    }
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Pretrain => commands::pretrain_cmd(&cfg),
        Command::Probe => commands::probe_cmd(&cfg),
        Command::Finetune => commands::finetune_cmd(&cfg),
        Command::Eval => commands::eval_cmd(&cfg),
        Command::ExportEmbeddings => commands::export_cmd(&cfg),
        Command::Ablate => commands::ablate_cmd(&cfg),
    }
}

/// 2 for usage and configuration errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.downcast_ref::<Usage>().is_some() || matches!(e.downcast_ref::<mtslof::Error>(), Some(mtslof::Error::Config(_)))
    });
    if config {
        2
    } else {
        1
    }
}

/// Caps the rayon pool at `MTSLOF_THREADS` workers when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MTSLOF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Usage(format!("MTSLOF_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}
