mod commands;
mod config;
mod tasks;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{MissingConfig, Overrides, RunConfig};

/// Raised for a lab suite name outside [`pgap_core::lab::SUITES`].
#[derive(Debug)]
pub struct UnknownSuite(pub String);

impl std::fmt::Display for UnknownSuite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "unknown suite {:?}; valid suites: {}",
            self.0,
            pgap_core::lab::SUITES.join(", ")
        )
    }
}

impl std::error::Error for UnknownSuite {}

#[derive(Parser)]
#[command(name = "pgap", version, about = "Zeroth-order training with gradient-aligned low-rank perturbations")]
#[command(after_long_help = config::DEFAULTS_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one optimizer; writes runlog.csv, summary.json, final.ckpt.
    #[command(after_long_help = config::DEFAULTS_HELP)]
    Train(Common),
    /// Run every [optimizer] compare entry on the same data; writes compare.csv.
    #[command(after_long_help = config::DEFAULTS_HELP)]
    Compare(Common),
    /// Run a Monte-Carlo suite; exit 0 iff every check passes.
    #[command(after_long_help = config::DEFAULTS_HELP)]
    Lab {
        /// variance, moments, angle, bias, probe-mse, davis-kahan or dispersion
        suite: String,
        #[command(flatten)]
        common: Common,
        /// Samples per statistic (variance, moments, angle, bias).
        #[arg(long)]
        samples: Option<u64>,
        /// Trials per probe count (probe-mse).
        #[arg(long)]
        trials: Option<u64>,
        /// Histogram bins (dispersion).
        #[arg(long)]
        bins: Option<usize>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// pgap or mezo.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    target_loss: Option<f64>,
    /// Subspace rank r.
    #[arg(long)]
    rank: Option<usize>,
    /// Refresh window k.
    #[arg(long)]
    window: Option<u64>,
    /// Probes per refresh h.
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    delta0: Option<f64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            optimizer: self.optimizer.clone(),
            task: self.task.clone(),
            seed: self.seed,
            out: self.out.clone(),
            steps: self.steps,
            target_loss: self.target_loss,
            rank: self.rank,
            window: self.window,
            probes: self.probes,
            delta0: self.delta0,
            ..Overrides::default()
        }
    }

    fn resolve(&self, flags: &Overrides) -> anyhow::Result<RunConfig> {
        let file = match &self.config {
            Some(p) => config::load(p)?,
            None => RunConfig::default(),
        };
        file.resolve(flags)
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Train(c) => commands::cmd_train(&c.resolve(&c.overrides())?),
        Command::Compare(c) => commands::cmd_compare(&c.resolve(&c.overrides())?),
        Command::Lab {
            suite,
            common,
            samples,
            trials,
            bins,
        } => {
            if !pgap_core::lab::SUITES.contains(&suite.as_str()) {
                return Err(UnknownSuite(suite).into());
            }
            let flags = Overrides {
                samples,
                trials,
                bins,
                ..common.overrides()
            };
            commands::cmd_lab(&suite, &common.resolve(&flags)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<MissingConfig>() || e.is::<UnknownSuite>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
