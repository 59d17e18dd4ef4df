use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctc_s2ut::cli::{run, Command, CommandArgs};

#[derive(Parser)]
#[command(name = "ctc-s2ut", about = "Parallel CTC speech-to-unit translation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Config file with `[section]` headers and `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Checkpoint file, or a directory holding ar.ckpt / nar1.ckpt / nar2.ckpt.
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,
    /// Data directory containing manifest.tsv.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the autoregressive baseline.
    TrainAr,
    /// Replace training targets with the baseline's greedy outputs.
    Distill,
    /// Stage 1: CTC with glancing, encoder initialized from the baseline.
    TrainNar,
    /// Stage 2: NMLA fine-tuning.
    FinetuneNmla,
    /// Unit-BLEU on the test split.
    Eval,
    /// Train and score the five technique combinations.
    Ablate,
    /// Batch-size-1 latency of both decoders by source length.
    Bench,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::GenData => Command::GenData,
        Cmd::TrainAr => Command::TrainAr,
        Cmd::Distill => Command::Distill,
        Cmd::TrainNar => Command::TrainNar,
        Cmd::FinetuneNmla => Command::FinetuneNmla,
        Cmd::Eval => Command::Eval,
        Cmd::Ablate => Command::Ablate,
        Cmd::Bench => Command::Bench,
    };
    let args = CommandArgs {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        ckpt: cli.ckpt,
        data: cli.data,
    };
    match run(command, &args) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
