use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;

use commands::Ctx;
use config::Config;
use error::CliError;

/// Volumetric diffusion toolkit.
#[derive(Parser, Debug)]
#[command(name = "voldiff", version)]
struct Cli {
    /// JSON configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (falls back to VOLDIFF_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides `model.checkpoint`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Overrides `data.dataset`.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom,
    /// Train the toy denoiser from scratch.
    Train,
    /// Fine-tune a control adapter on lesion-mask conditions.
    Finetune,
    /// Generate volumes.
    Sample {
        /// Run the network on the whole volume at once.
        #[arg(long)]
        no_tiling: bool,
    },
    /// Restore low-dose (noisy) volumes.
    Denoise,
    /// Restore thin slices from thick-slice acquisitions.
    Sr,
    /// Regenerate lesion regions.
    Inpaint,
    /// Reconstruction-based anomaly detection.
    Anomaly,
    /// Score stored outputs against the clean volumes.
    Eval {
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Write a cross-section as a PGM image.
    Slice {
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn threads(cli: &Cli, cfg: &Config) -> Result<Option<usize>, CliError> {
    if let Some(n) = cli.threads {
        return Ok(Some(n));
    }
    if let Ok(v) = std::env::var("VOLDIFF_THREADS") {
        return v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Validation(format!("VOLDIFF_THREADS must be a positive integer, got {v:?}")));
    }
    Ok(cfg.threads)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(c) = &cli.checkpoint {
        cfg.model.checkpoint = Some(c.clone());
    }
    if let Some(d) = &cli.dataset {
        cfg.data.dataset = d.clone();
    }
    cfg.threads = threads(&cli, &cfg)?;
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(CliError::Validation("thread count must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let out = cfg.out.clone().ok_or_else(|| CliError::Validation("no output directory (--out)".into()))?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
    let ctx = Ctx { cfg, out };
    match cli.command {
        Command::Phantom => commands::phantom(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Finetune => commands::finetune(&ctx),
        Command::Sample { no_tiling } => commands::sample(&ctx, no_tiling),
        Command::Denoise => commands::denoise(&ctx),
        Command::Sr => commands::sr(&ctx),
        Command::Inpaint => commands::inpaint(&ctx),
        Command::Anomaly => commands::anomaly(&ctx),
        Command::Eval { results } => commands::eval(&ctx, results.as_deref()),
        Command::Slice { input } => commands::slice(&ctx, input.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
