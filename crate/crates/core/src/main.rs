use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use curveflow::cli::{self, AnalyzeArgs, AnalyzeTarget, ExperimentConfig, Overrides, SampleArgs};
use curveflow::ScheduleKind;

#[derive(Parser)]
#[command(name = "curveflow", version, about = "Curvature-regularized flow matching on 2-D toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, out: self.out.clone() }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes checkpoint.json, history.csv, manifest.json.
    Train(Common),
    /// Draw samples from a checkpoint; writes samples.csv and samples.svg.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Solver steps (default: from the checkpoint config).
        #[arg(long)]
        steps: Option<usize>,
        /// euler or heun (default: from the checkpoint config).
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config replacing the checkpoint's (solver, overlay data, output_dir).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Curvature profile of a checkpoint's schedule or of a closed-form kind.
    Analyze {
        #[arg(long, conflicts_with = "schedule", required_unless_present = "schedule")]
        checkpoint: Option<PathBuf>,
        /// linear, trigonometric or neural (randomly initialized).
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        grid_m: Option<usize>,
        #[arg(long, default_value_t = 256)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config supplying held-out data and grid size for a schedule kind.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Rectified-flow baselines and the lambda grid; writes results.csv.
    Compare(Common),
    /// Autodiff vs finite differences on small random instances.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb one analytic gradient entry (negative control).
        #[arg(long, hide = true)]
        corrupt: bool,
        /// Also write gradcheck.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn invalid(e: curveflow::Error) -> i32 {
    eprintln!("error: {e}");
    cli::exit_code(&e)
}

fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Train(c) => cli::cmd_train(&c.config, &c.overrides()),
        Command::Compare(c) => cli::cmd_compare(&c.config, &c.overrides()),
        Command::Sample { checkpoint, count, steps, method, seed, out, config } => {
            let config = match config.map(|p| ExperimentConfig::load(&p)).transpose() {
                Ok(c) => c,
                Err(e) => return invalid(e),
            };
            cli::cmd_sample(&SampleArgs { checkpoint, count, steps, method, seed, out, config })
        }
        Command::Analyze { checkpoint, schedule, grid_m, pairs, seed, out, config } => {
            let config = match config.map(|p| ExperimentConfig::load(&p)).transpose() {
                Ok(c) => c,
                Err(e) => return invalid(e),
            };
            let target = match (checkpoint, schedule) {
                (Some(path), _) => AnalyzeTarget::Checkpoint(path),
                (None, Some(kind)) => match kind.parse::<ScheduleKind>() {
                    Ok(k) => AnalyzeTarget::Kind(k),
                    Err(e) => return invalid(e),
                },
                (None, None) => unreachable!("clap requires one of them"),
            };
            cli::cmd_analyze(&AnalyzeArgs { target, grid_m, pairs, seed, out, config })
        }
        Command::Gradcheck { seed, corrupt, out } => cli::cmd_gradcheck(seed, corrupt, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let code = run(Cli::parse());
    ExitCode::from(code as u8)
}
