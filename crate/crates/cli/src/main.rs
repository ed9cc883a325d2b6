use clap::{Parser, Subcommand};
use slicetune_cli::commands::{cmd_gen, cmd_report, cmd_resume, cmd_search};
use slicetune_cli::config::{Overrides, RunConfig};
use slicetune_cli::workspace::Workspace;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "slicetune",
    version,
    about = "Two-stage hyper-parameter search over a synthetic slice-classification task"
)]
struct Cli {
    /// Configuration file (default: <workspace>/config.toml when present)
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Directory holding the dataset, ledger, models, and reports
    #[arg(long, global = true, default_value = ".", value_name = "DIR")]
    workspace: PathBuf,

    /// Master seed; the dataset and search stages derive theirs from it
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// How many of the best trials the report combines into the ensemble
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Number of random warm-up trials
    #[arg(long, global = true)]
    random_iters: Option<u64>,

    /// Number of adaptive trials after the warm-up
    #[arg(long, global = true)]
    adaptive_iters: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic volume dataset
    Gen,
    /// Run the search from scratch: random warm-up, then adaptive trials
    Search {
        /// Stop after this many new trials; `resume` picks up the rest
        #[arg(long, value_name = "N")]
        max_new_trials: Option<u64>,
    },
    /// Continue an interrupted search from the persisted ledger
    Resume {
        /// Stop after this many new trials
        #[arg(long, value_name = "N")]
        max_new_trials: Option<u64>,
    },
    /// Write report tables, confusion matrices, and the localization track
    Report,
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let overrides = Overrides {
        seed: cli.seed,
        k: cli.k,
        random_iters: cli.random_iters,
        adaptive_iters: cli.adaptive_iters,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.workspace, &overrides)?;
    let ws = Workspace::new(&cli.workspace, &cfg.paths);
    match cli.command {
        Command::Gen => cmd_gen(&cfg, &ws),
        Command::Search { max_new_trials } => cmd_search(&cfg, &ws, max_new_trials),
        Command::Resume { max_new_trials } => cmd_resume(&cfg, &ws, max_new_trials),
        Command::Report => cmd_report(&cfg, &ws),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(message) => {
            println!("{message}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
