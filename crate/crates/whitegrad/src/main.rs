use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use whitegrad::harness::cli::{bias_exp_cmd, compare_runs, train_cmd, verify_cmd};
use whitegrad::harness::config::{apply_overrides, parse_config, RunConfig};
use whitegrad::{Error, Result};

/// Training benchmarks for whitening-reparametrized stochastic descent.
///
/// Exit codes: 0 on success, 2 when a training run diverges, 1 for any
/// other failure including usage errors.
#[derive(Parser)]
#[command(name = "whitegrad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one algorithm; writes train.csv and a checkpoint under --out.
    Train(RunArgs),
    /// Train every configured algorithm across the stepsize grid on the
    /// same data and seed, writing per-run records plus compare.csv.
    Compare(RunArgs),
    /// Run the numerical self-checks, one verdict line per check.
    Verify,
    /// Measure the estimation-coupling bias of minibatch constants.
    BiasExp {
        /// Monte Carlo trials per batch size.
        #[arg(long, default_value_t = 20000)]
        trials: usize,
        /// Constant per-example gradient used by the probe unit.
        #[arg(long, default_value_t = 1.0)]
        grad: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for bias.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file of `key = value` lines; defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set gamma=0.1. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for CSV records and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shorthand for --set seed=N, applied last.
    #[arg(long)]
    seed: Option<u64>,
}

fn build_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => parse_config(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &args.set)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = build_config(&args)?;
            train_cmd(&cfg, args.out.as_deref())
        }
        Command::Compare(args) => {
            let cfg = build_config(&args)?;
            compare_runs(&cfg, args.out.as_deref()).map(|_| ())
        }
        Command::Verify => verify_cmd(),
        Command::BiasExp {
            trials,
            grad,
            seed,
            out,
        } => bias_exp_cmd(trials, grad, seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Divergence(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
