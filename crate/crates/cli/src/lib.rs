//! The `fusedmpc` command line: batched MPC solves, latency benchmarks,
//! RL training and lap-time evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fusedmpc_rl::TrainMode;

pub mod bench;
pub mod config;
pub mod error;
pub mod eval;
pub mod solve;
pub mod train;

pub use config::RunConfig;
pub use error::{CliError, CliResult};

const AFTER_HELP: &str = "Any config key can be overridden with --section.key VALUE, e.g. --solver.T 20 or --grid.K [1,5].";

#[derive(Debug, Parser)]
#[command(name = "fusedmpc", version, about = "Batched differentiable MPC: solve, bench, train, eval", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for batched solves.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TrainModeArg {
    #[value(name = "ac_mpc")]
    AcMpc,
    #[value(name = "ac_mlp")]
    AcMlp,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a batch of MPC problems and dump trajectories.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<config::ModeArg>,
    },
    /// Measure forward and backward latency in both dispatch modes.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Train a policy on the gate-racing task.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<TrainModeArg>,
        /// Continue from a checkpoint; metrics are appended.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate checkpoints and tabulate lap times.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file; repeat to compare several policies.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
}

fn load(common: &Common, overrides: &[(String, String)]) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

/// Runs a parsed command with the dotted overrides already split out.
pub fn run(cli: Cli, overrides: &[(String, String)]) -> CliResult<()> {
    match cli.command {
        Command::Solve { common, mode } => {
            let mut cfg = load(&common, overrides)?;
            if let Some(m) = mode {
                cfg.solver.mode = m;
            }
            cfg.validate()?;
            solve::run(&cfg)
        }
        Command::Bench { common, reps } => {
            let mut cfg = load(&common, overrides)?;
            if let Some(r) = reps {
                cfg.bench.reps = r;
            }
            cfg.validate()?;
            bench::run(&cfg)
        }
        Command::Train { common, mode, resume } => {
            let mut cfg = load(&common, overrides)?;
            match mode {
                Some(TrainModeArg::AcMpc) => cfg.train.mode = TrainMode::AcMpc,
                Some(TrainModeArg::AcMlp) => cfg.train.mode = TrainMode::AcMlp,
                None => {}
            }
            cfg.validate()?;
            train::run(&cfg, resume.as_deref())
        }
        Command::Eval {
            common,
            checkpoints,
            episodes,
        } => {
            let mut cfg = load(&common, overrides)?;
            if !checkpoints.is_empty() {
                cfg.eval.checkpoints = checkpoints;
            }
            if let Some(e) = episodes {
                cfg.eval.episodes = e;
            }
            cfg.validate()?;
            eval::run(&cfg)
        }
    }
}

/// Full entry point over raw process arguments.
pub fn main_with(args: Vec<String>) -> ExitCode {
    let (rest, overrides) = match config::split_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
