//! CTC-based non-autoregressive speech-to-unit translation at desk scale.

pub mod bleu;
pub mod cli;
pub mod ctc;
pub mod error;
pub mod glat;
pub mod model;
pub mod nmla;
pub mod numerics;
pub mod pipeline;
pub mod units;

pub use error::{Error, Result};
