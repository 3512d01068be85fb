//! Command-line driver for the BDVAE pipeline.

pub mod config;
pub mod pipeline;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::RunConfig;
use pipeline::Stage;

pub const THREADS_ENV: &str = "BDVAE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "bdvae", version, about = "Train and analyse a biologically disentangled VAE")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compile gene sets into encoder masks.
    Masks(Common),
    /// Split, standardize, allocate latents and train.
    Train(Common),
    /// Score the trained model, or an external predictions file.
    Eval(Common),
    /// Latent screening, clustering, MDS, pathway activity and attributions.
    Analyze(Common),
    /// Kaplan–Meier curves and log-rank test across clusters.
    Survival(Common),
    /// Write a synthetic cohort to the configured data paths.
    Synth(Common),
    /// masks, train, eval, analyze and survival in sequence.
    All(Common),
}

impl Command {
    fn parts(&self) -> (Stage, &Common) {
        match self {
            Command::Masks(c) => (Stage::Masks, c),
            Command::Train(c) => (Stage::Train, c),
            Command::Eval(c) => (Stage::Eval, c),
            Command::Analyze(c) => (Stage::Analyze, c),
            Command::Survival(c) => (Stage::Survival, c),
            Command::Synth(c) => (Stage::Synth, c),
            Command::All(c) => (Stage::All, c),
        }
    }
}

/// Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (stage, common) = cli.command.parts();
    let mut cfg = match RunConfig::load(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.paths.output = std::path::absolute(out).unwrap_or_else(|_| out.clone());
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return 2;
    }
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 2;
    }
    match pipeline::run(stage, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            1
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
    // A pool that already exists (repeated calls in one process) is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
