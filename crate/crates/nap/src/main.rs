use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nap::cli::{self, CliError};
use nap::tasks::KernelKind;

#[derive(Parser)]
#[command(
    name = "nap",
    version,
    about = "Learned acquisition functions for black-box optimization over finite candidate sets"
)]
struct Cli {
    /// Global seed override; wins over the NAP_SEED environment variable.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads. This build computes on a single worker, so
    /// any positive value is accepted.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic GP task family with a train/validation/test manifest.
    GenTasks {
        #[arg(long, default_value_t = 8)]
        num_tasks: usize,
        #[arg(long, default_value_t = 64)]
        points: usize,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value = "matern52")]
        kernel: String,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Explicit train,validation,test counts (must sum to --num-tasks).
        #[arg(long, value_delimiter = ',')]
        split: Option<Vec<usize>>,
        /// Lengthscale range `lo,hi` the tasks are drawn from (log-uniform).
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.5")]
        lengthscales: Vec<f64>,
    },
    /// Train a model from a run configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Task manifest; overrides the config's `tasks` entry.
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Output directory; overrides the config's `out` entry.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from <out>/last.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate methods on the manifest's test split, writing regret CSV + SVG.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value_t = 5)]
        init: usize,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Comma-separated subset of: nap, np-ei, gp-ei, random.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "nap,np-ei,gp-ei,random"
        )]
        methods: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print record-count statistics per horizon.
    Sparsity {
        /// Comma-separated horizons.
        #[arg(short = 'T', long = "T", value_delimiter = ',', required = true)]
        horizons: Vec<usize>,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        /// Also print the exact Stirling distribution and the total-variation
        /// distance to it (horizons up to 10 only).
        #[arg(long)]
        exact: bool,
        /// Add the trained policy's record profile on synthetic tasks.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Print a checkpoint's header summary.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
    }
    match cli.command {
        Command::GenTasks {
            num_tasks,
            points,
            dim,
            kernel,
            out,
            force,
            split,
            lengthscales,
        } => {
            let kernel: KernelKind = kernel
                .parse()
                .map_err(|e: String| CliError::Config(e))?;
            let split = match split {
                Some(s) if s.len() == 3 => Some((s[0], s[1], s[2])),
                Some(s) => {
                    return Err(CliError::Config(format!(
                        "--split needs exactly 3 counts, got {}",
                        s.len()
                    )))
                }
                None => None,
            };
            if lengthscales.len() != 2 {
                return Err(CliError::Config(format!(
                    "--lengthscales needs exactly 2 values, got {}",
                    lengthscales.len()
                )));
            }
            let seed = cli::effective_seed(cli.seed, 0)?;
            cli::cmd_gen_tasks(
                seed,
                num_tasks,
                points,
                dim,
                kernel,
                &out,
                force,
                split,
                (lengthscales[0], lengthscales[1]),
            )
        }
        Command::Train {
            config,
            tasks,
            out,
            resume,
        } => cli::cmd_train(&config, tasks.as_deref(), out.as_deref(), resume, cli.seed),
        Command::Eval {
            ckpt,
            tasks,
            budget,
            init,
            seeds,
            methods,
            out,
        } => cli::cmd_eval(
            ckpt.as_deref(),
            &tasks,
            budget,
            init,
            seeds,
            &methods,
            &out,
            cli.seed,
        ),
        Command::Sparsity {
            horizons,
            trials,
            exact,
            ckpt,
        } => cli::cmd_sparsity(&horizons, trials, exact, ckpt.as_deref(), cli.seed),
        Command::Inspect { ckpt } => cli::cmd_inspect(&ckpt),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
