//! `covrecon`: sampling, estimation, reconstruction, studies and planning
//! from a single TOML config.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "covrecon", version, about = "Covariance operator reconstruction of Gaussian random fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Study config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; falls back to $COVRECON_OUT, then `out` in the config, then ./out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw sample batches for every (n, M) pair.
    Sample {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate covariance matrices, from a sample file or fresh draws.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// A batch written by `sample`; its `.json` sidecar must sit next to it.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run the full pipeline once per (n, M) pair and write error reports.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Use the exact nodal covariance instead of samples.
        #[arg(long)]
        exact: bool,
        /// Points per axis of the kernel snapshot.
        #[arg(long, default_value_t = 33)]
        snapshot: usize,
    },
    /// Monte Carlo study over the (n, M, L) grid.
    Study {
        #[command(flatten)]
        common: Common,
        /// Reuse finished cells under <out>/cells.
        #[arg(long)]
        resume: bool,
        /// Use the exact nodal covariance instead of samples.
        #[arg(long)]
        exact: bool,
    },
    /// Choose (L, M, h) for a target accuracy.
    Plan {
        /// Plan config (TOML) with `epsilon`, `regime` and a `[profile]` table.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Force case 1, 2 or 3.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        regime: Option<u8>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also run a study at the planned parameters (capped) and report mean error / epsilon.
        #[arg(long)]
        verify: bool,
        #[arg(long, default_value_t = 64)]
        max_n: usize,
        #[arg(long, default_value_t = 20_000)]
        max_m: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn set_workers(n: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("workers: {e}")))?;
    }
    Ok(())
}

fn load(common: &Common) -> Result<(covrecon::StudyConfig, PathBuf), CliError> {
    let cfg = config::load_study(&common.config, common.seed, common.workers)?;
    set_workers(cfg.workers)?;
    let out = config::output_dir(common.out.as_deref(), cfg.out.as_deref());
    Ok((cfg, out))
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sample { common } => {
            let (cfg, out) = load(&common)?;
            report(&commands::sample(&cfg, &out)?);
        }
        Command::Estimate { common, input } => {
            let (cfg, out) = load(&common)?;
            report(&commands::estimate(&cfg, input.as_deref(), &out)?);
        }
        Command::Reconstruct { common, exact, snapshot } => {
            let (mut cfg, out) = load(&common)?;
            cfg.exact_covariance |= exact;
            report(&commands::reconstruct(&cfg, &out, snapshot)?);
        }
        Command::Study { common, resume, exact } => {
            let (mut cfg, out) = load(&common)?;
            cfg.exact_covariance |= exact;
            report(&[commands::study(&cfg, &out, resume)?]);
        }
        Command::Plan { config, epsilon, regime, out, verify, max_n, max_m, reps, seed } => {
            let cfg = config::load_plan(config.as_deref())?;
            cfg.profile.validate()?;
            let out = config::output_dir(out.as_deref(), None);
            let caps = commands::VerifyCaps { max_n, max_m, reps, seed };
            let text = commands::plan(&cfg, epsilon, regime, &out, verify.then_some(&caps))?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("covrecon: {line}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
