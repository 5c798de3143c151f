//! Command-line front end: parses JSON experiment configs and runs flows,
//! geodesics, discrepancies, the identity suite and the ridge study.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod run;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::{load_config, parse_config, Config, Context};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "kflow",
    version,
    about = "Kernel gradient-flow experiments on grids and particles"
)]
pub struct Cli {
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Random seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a gradient flow and export diagnostics and states as CSV.
    Flow { config: PathBuf },
    /// Sample a closed-form geodesic between `initial` and `target`.
    Geodesic { config: PathBuf },
    /// Evaluate discrepancies between `initial` and `target`; prints JSON.
    Discrepancy { config: PathBuf },
    /// Run the identity checks over the seeded corpus.
    Verify,
    /// Parameter studies.
    Study {
        #[command(subcommand)]
        study: Study,
    },
}

#[derive(Debug, Subcommand)]
pub enum Study {
    /// Ridge-approximate versus pure Fisher-Rao flows for a list of ridges.
    Gamma { config: PathBuf },
}

fn context(path: &Path, seed: Option<u64>) -> Result<Context, CliError> {
    let cfg = load_config(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Context::new(cfg, base, seed))
}

/// Runs a parsed command line and returns the process exit code.
pub fn execute(cli: &Cli, stdout: &mut impl Write, stderr: &mut impl Write) -> i32 {
    let result = dispatch(cli);
    match result {
        Ok((outcome, ok)) => {
            let _ = stdout.write_all(outcome.stdout.as_bytes());
            if !cli.quiet {
                if let Some(dir) = &outcome.dir {
                    let _ = writeln!(stderr, "wrote {} file(s) to {}", outcome.files.len(), dir.display());
                }
            }
            if ok {
                0
            } else {
                let _ = writeln!(stderr, "verification failed");
                1
            }
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(run::Outcome, bool), CliError> {
    let out = |ctx: &Context| ctx.output_dir(cli.out.as_deref());
    match &cli.command {
        Command::Flow { config } => {
            let ctx = context(config, cli.seed)?;
            Ok((run::run_flow(&ctx, &out(&ctx))?, true))
        }
        Command::Geodesic { config } => {
            let ctx = context(config, cli.seed)?;
            Ok((run::run_geodesic(&ctx, &out(&ctx))?, true))
        }
        Command::Discrepancy { config } => {
            let ctx = context(config, cli.seed)?;
            Ok((run::run_discrepancy(&ctx, &out(&ctx))?, true))
        }
        Command::Verify => {
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            run::run_verify(cli.seed.unwrap_or(kflow::corpus::DEFAULT_SEED), &dir)
        }
        Command::Study {
            study: Study::Gamma { config },
        } => {
            let ctx = context(config, cli.seed)?;
            Ok((run::run_study_gamma(&ctx, &out(&ctx))?, true))
        }
    }
}
