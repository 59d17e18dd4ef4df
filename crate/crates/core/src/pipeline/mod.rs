//! Data generation, unit discovery, distillation and training.

pub mod distill;
pub mod io;
pub mod kmeans;
pub mod synth;
pub mod train;

pub use distill::{distill, DistillReport};
pub use kmeans::{kmeans_assign, kmeans_fit, Codebook};
pub use synth::{sweep_lambda, Dataset, Sample, Split, SynthTask, SynthTaskSpec};
pub use train::{train_ar, train_nar, Adam, LrSchedule, Stage, TrainConfig, TrainReport};
