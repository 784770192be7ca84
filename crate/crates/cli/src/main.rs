mod config;
mod flow;
mod measure;
mod output;
mod report;
mod runs;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use edgelab::decomp::Aggregation;
use edgelab::trainer::Phase;

use config::{CheckFailed, ConfigError};

#[derive(Parser)]
#[command(
    name = "edgelab",
    version,
    about = "Spectral edge analysis of attention training runs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PhaseArg {
    Init,
    PreGrok,
    Grok,
    Late,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Init => Phase::Init,
            PhaseArg::PreGrok => Phase::PreGrok,
            PhaseArg::Grok => Phase::Grok,
            PhaseArg::Late => Phase::Late,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AggregationArg {
    WindowSum,
    PerStep,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::WindowSum => Aggregation::WindowSum,
            AggregationArg::PerStep => Aggregation::PerStep,
        }
    }
}

/// Checkpoint selection shared by the measurement commands.
#[derive(clap::Args, Clone, Debug)]
pub struct Target {
    /// Run directory written by `train`.
    pub run: PathBuf,
    #[arg(long, value_enum, default_value = "late")]
    pub phase: PhaseArg,
    /// Test examples to evaluate on (all when 0).
    #[arg(long, default_value_t = 1000)]
    pub eval_limit: usize,
}

impl Target {
    pub fn limit(&self) -> Option<usize> {
        (self.eval_limit > 0).then_some(self.eval_limit)
    }

    pub fn phase_name(&self) -> &'static str {
        Phase::from(self.phase).name()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run with online spectral logging.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the per-step log used by `analyze`.
        #[arg(long)]
        step_log: bool,
    },
    /// Run every (seed, weight decay) cell of a suite config.
    Suite {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 3 unless runs with decay grok and runs without do not.
        #[arg(long)]
        check: bool,
    },
    /// Recompute snapshot and decomposition logs from the step log.
    Analyze {
        run: PathBuf,
        #[arg(long, value_enum, default_value = "window-sum")]
        aggregation: AggregationArg,
    },
    /// Ablate the leading directions against random controls.
    Ablate {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = 2)]
        dims: usize,
        #[arg(long, default_value_t = 20)]
        controls: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Loss and KL along one direction over a symmetric grid.
    Sweep {
        #[command(flatten)]
        target: Target,
        /// Direction index in the phase snapshot.
        #[arg(long, conflicts_with = "random")]
        k: Option<usize>,
        /// Seed of a random direction instead.
        #[arg(long)]
        random: Option<u64>,
        #[arg(long, default_value_t = 2.0)]
        range: f64,
        #[arg(long, default_value_t = 41)]
        points: usize,
    },
    /// Directional curvature of every snapshot direction, plus the path-norm table.
    Curvature {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = 1e-2)]
        eps: f64,
        /// Random control directions.
        #[arg(long, default_value_t = 0)]
        random: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the training set instead of the test set.
        #[arg(long)]
        train_loss: bool,
    },
    /// Depth and compositional probes on one residual block.
    Probe {
        #[command(flatten)]
        target: Target,
        /// Block index (last block when absent).
        #[arg(long)]
        layer: Option<usize>,
        /// Test sequences feeding the probes.
        #[arg(long, default_value_t = 200)]
        sequences: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Positional spectra, attention statistics, edge function and class.
    Fourier {
        #[command(flatten)]
        target: Target,
        /// Test examples for the edge-response measurements.
        #[arg(long, default_value_t = 500)]
        response_limit: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Continue from a checkpoint under several weight decays.
    Intervene {
        #[command(flatten)]
        target: Target,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2")]
        wd: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 200)]
        probe_sequences: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Simulate the gap flow over a parameter grid.
    Gapflow {
        spec: PathBuf,
        #[arg(long, default_value = "gapflow")]
        out: PathBuf,
    },
    /// Tables and plots for a run or suite directory.
    Report { dir: PathBuf },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, out, step_log } => runs::train(&config, out.as_deref(), step_log),
        Command::Suite { config, out, check } => runs::suite(&config, out.as_deref(), check),
        Command::Analyze { run, aggregation } => runs::analyze(&run, aggregation.into()),
        Command::Ablate {
            target,
            dims,
            controls,
            seed,
        } => measure::ablate(&target, dims, controls, seed),
        Command::Sweep {
            target,
            k,
            random,
            range,
            points,
        } => measure::sweep(&target, k, random, range, points),
        Command::Curvature {
            target,
            eps,
            random,
            seed,
            train_loss,
        } => measure::curvature(&target, eps, random, seed, train_loss),
        Command::Probe {
            target,
            layer,
            sequences,
            seed,
        } => measure::probe(&target, layer, sequences, seed),
        Command::Fourier {
            target,
            response_limit,
            seed,
        } => measure::fourier(&target, response_limit, seed),
        Command::Intervene {
            target,
            wd,
            steps,
            probe_sequences,
            seed,
        } => measure::intervene(&target, &wd, steps, probe_sequences, seed),
        Command::Gapflow { spec, out } => flow::gapflow(&spec, &out),
        Command::Report { dir } => report::report(&dir),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        1
    } else if err.downcast_ref::<CheckFailed>().is_some() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
