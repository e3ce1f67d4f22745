use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rft_core::cli::{self, CliError};
use rft_core::grpo::TaskKind;

#[derive(Parser)]
#[command(name = "rft", version, about = "Reinforcement fine-tuning toolkit on symbolic visual-reasoning tasks")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Task {
    Counting,
    NumericQa,
    Trance,
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Counting => TaskKind::Counting,
            Task::NumericQa => TaskKind::NumericQa,
            Task::Trance => TaskKind::Trance,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a JSONL dataset.
    Gen {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML generator config for the task.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predictions file against a dataset.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        reward_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy; writes checkpoints, telemetry.csv and pool.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Greedy-decode a dataset with a checkpoint and report per-subset Acc.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        reward_config: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Gen { task, n, seed, config, out } => {
            print!("{}", cli::cmd_gen(task.into(), n, seed, config.as_deref(), &out)?);
        }
        Cmd::Score { pred, data, reward_config, out } => {
            print!("{}", cli::cmd_score(&pred, &data, reward_config.as_deref(), &out)?.table());
        }
        Cmd::Train { config, out_dir } => {
            let ckpt = cli::cmd_train(&config, &out_dir)?;
            println!("final checkpoint: {}", ckpt.display());
        }
        Cmd::Eval { ckpt, data, reward_config, out } => {
            print!("{}", cli::cmd_eval(&ckpt, &data, reward_config.as_deref(), out.as_deref())?.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(args.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
