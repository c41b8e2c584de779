use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qadp_cli::commands::default_compare_inputs;
use qadp_cli::{cmd_compare, cmd_estimate, cmd_simulate, cmd_synth, cmd_train, CliError, Overrides, PolicyKind, RunConfig, SimMode};

#[derive(Parser)]
#[command(name = "qadp", version, about = "Quadratic approximate dynamic programming for hydrothermal scheduling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides the output directory in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(
            &self.config,
            &Overrides {
                seed: self.seed,
                out: self.out.clone(),
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit the hydrologic Markov model to the inflow record.
    Estimate(Common),
    /// Train value functions by the backward pass.
    Train(Common),
    /// Evaluate a policy or the perfect-foresight bound.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "trained")]
        policy: PolicyKind,
        #[arg(long, value_enum, default_value = "montecarlo")]
        mode: SimMode,
    },
    /// Paired comparison of reports (defaults to every report in the output directory).
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        reports: Vec<PathBuf>,
    },
    /// Write a synthetic cascade system, inflow record and run config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 52)]
        horizon: usize,
        #[arg(long, default_value_t = 105)]
        years: usize,
        #[arg(long, default_value_t = 5)]
        n_states: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Estimate(c) => {
            cmd_estimate(&c.load()?)?;
        }
        Command::Train(c) => {
            let (_, summary) = cmd_train(&c.load()?, c.workers)?;
            println!("qp_count {}", summary.qp_count);
        }
        Command::Simulate { common, policy, mode } => {
            let out = cmd_simulate(&common.load()?, policy, mode, common.workers)?;
            for p in &out.points {
                println!(
                    "{} level {} mean {} band {}",
                    out.stem, p.level, p.report.mean_total, p.report.band_halfwidth
                );
            }
        }
        Command::Compare { config, out, reports } => {
            let dir = match (out, config) {
                (Some(o), _) => o,
                (None, Some(c)) => RunConfig::load(&c, &Overrides::default())?.out,
                (None, None) => return Err(CliError::config("compare needs --out or --config")),
            };
            let inputs = if reports.is_empty() { default_compare_inputs(&dir)? } else { reports };
            let res = cmd_compare(&dir, &inputs)?;
            for r in &res.rows {
                println!("{} vs {}: {:+.3}% (paired se {:.3e})", r.policy, r.baseline, r.delta_pct, r.paired_se);
            }
        }
        Command::Synth { out, seed, horizon, years, n_states } => {
            let s = cmd_synth(&out, horizon, years, n_states, seed)?;
            println!("{}", s.config.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
