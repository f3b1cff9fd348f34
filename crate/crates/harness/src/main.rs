use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use log::error;
use mtrlab::commands::{output_dir, run, RunContext};
use mtrlab::{ExperimentConfig, ExperimentKind, HarnessError, HarnessResult};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    GenData,
    Train,
    AttackEval,
    VulnScan,
    SubsampleCurve,
    TheoryCheck,
    Advtrain,
    #[value(alias = "attack-matrix")]
    Sweep,
    Report,
}

impl From<Command> for ExperimentKind {
    fn from(c: Command) -> Self {
        match c {
            Command::GenData => ExperimentKind::GenData,
            Command::Train => ExperimentKind::Train,
            Command::AttackEval => ExperimentKind::AttackEval,
            Command::VulnScan => ExperimentKind::VulnScan,
            Command::SubsampleCurve => ExperimentKind::SubsampleCurve,
            Command::TheoryCheck => ExperimentKind::TheoryCheck,
            Command::Advtrain => ExperimentKind::Advtrain,
            Command::Sweep => ExperimentKind::Sweep,
            Command::Report => ExperimentKind::Report,
        }
    }
}

/// Multi-task adversarial robustness experiments.
#[derive(Debug, Parser)]
#[command(name = "mtrlab", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Run directory (defaults to the config's output_dir, then runs/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed; the effective seed is recorded in run.json.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel cells and examples.
    #[arg(long)]
    workers: Option<usize>,
}

fn execute(cli: Cli) -> HarnessResult<()> {
    let kind = ExperimentKind::from(cli.command);
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(k) = cfg.kind {
        if k != kind {
            return Err(HarnessError::Config(format!(
                "config is for `{}` but the command is `{}`",
                k.as_str(),
                kind.as_str()
            )));
        }
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let workers = match cli.workers {
        Some(0) => return Err(HarnessError::Config("--workers must be >= 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| HarnessError::Other(e.into()))?;
    let ctx = RunContext {
        out: output_dir(cli.out.as_deref(), &cfg, kind),
        workers,
    };
    run(kind, &cfg, &ctx)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
