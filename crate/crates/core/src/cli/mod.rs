//! Evaluation, ablation, latency benchmark and the subcommand surface.

pub mod ablation;
pub mod bench;
pub mod commands;
pub mod config;

pub use crate::bleu::unit_bleu;
pub use ablation::{run_ablation, AblationRow, AblationTable};
pub use bench::{bench_latency, BenchReport};
pub use commands::{run, Command, CommandArgs};
pub use config::{ConfigFile, RunConfig};
