//! Command-line driver: `ngplus <task> --config <path> [--seed N] [--out DIR]`.
//!
//! Exit code 0 means the task ran and every built-in assertion passed, 1
//! means the run finished but an assertion failed (or a numeric error
//! aborted it), 2 means the config or an I/O path was unusable. The summary
//! is printed to stdout and also written to `summary.txt` in the output
//! directory.

use clap::{Parser, ValueEnum};
use ngplus::harness::{parse_config, run_task, Task};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    /// Mini-batch training with the configured optimizer.
    Train,
    /// Gram-curvature versus flattened-covariance sampling study.
    GfimStudy,
    /// Online learner with regret and potential audits.
    Regret,
    /// Finite-difference and factored-gradient checks.
    Gradcheck,
    /// Monotone quadratic descent plus the stochastic decay envelope.
    Convergence,
}

impl From<TaskArg> for Task {
    fn from(arg: TaskArg) -> Task {
        match arg {
            TaskArg::Train => Task::Train,
            TaskArg::GfimStudy => Task::GfimStudy,
            TaskArg::Regret => Task::Regret,
            TaskArg::Gradcheck => Task::Gradcheck,
            TaskArg::Convergence => Task::Convergence,
        }
    }
}

#[derive(Parser)]
#[command(name = "ngplus", version, about = "Runs one reproducible optimizer study")]
struct Cli {
    /// Which study to run.
    #[arg(value_enum)]
    task: TaskArg,

    /// Path to a line-oriented `key = value` config file.
    #[arg(long)]
    config: PathBuf,

    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory for metrics.csv and summary.txt; defaults to the
    /// config's `out` key.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> ngplus::Result<bool> {
    let text = std::fs::read_to_string(&cli.config)?;
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.unwrap_or_else(|| PathBuf::from(&cfg.out));
    let outcome = run_task(cli.task.into(), &cfg, &out)?;
    print!("{}", outcome.summary);
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
