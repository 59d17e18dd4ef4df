//! Speech encoder, parallel CTC decoder and the autoregressive baseline.

mod ar;
pub mod checkpoint;
mod config;
mod encoder;
pub mod layers;
mod nar;

pub use ar::{ArModel, ArOutput};
pub use config::{ModelConfig, Variant};
pub use encoder::FeatureSequence;
pub use layers::Ctx;
pub use nar::{NarForward, NarModel};

use crate::error::Result;
use crate::numerics::Tensor;

/// Decoder work done for one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeStats {
    /// Decoder forward passes (one per emitted symbol for the AR model,
    /// including the end-of-sequence step).
    pub decoder_passes: usize,
    /// Generation hit the length cap before emitting end-of-sequence.
    pub truncated: bool,
}

/// Source row for each of the `λ · n` upsampled positions.
pub fn upsample_index(n: usize, lambda: usize) -> Vec<usize> {
    (0..lambda * n).map(|i| i / lambda).collect()
}

/// Repeats every row of `h` `λ` times.
pub fn upsample(h: &Tensor, lambda: usize) -> Tensor {
    let idx = upsample_index(h.rows(), lambda);
    let mut data = Vec::with_capacity(idx.len() * h.cols());
    for &i in &idx {
        data.extend_from_slice(h.row(i));
    }
    Tensor::new(&[idx.len(), h.cols()], data).expect("upsample shape")
}

/// Copies every encoder parameter of `from` into `to` by name. Decoder
/// parameters are left alone. Returns the number of tensors copied.
pub fn transfer_encoder(from: &ArModel, to: &mut NarModel) -> Result<usize> {
    from.config().check_encoder_compatible(to.config())?;
    let src = from.params();
    let dst = to.params_mut();
    let mut copied = 0;
    for p in src.iter().filter(|p| p.name.starts_with("encoder.")) {
        let id = dst.id(&p.name).ok_or_else(|| {
            crate::Error::Invalid(format!("target model has no parameter {}", p.name))
        })?;
        let target = dst.get_mut(id);
        if target.value.shape() != p.value.shape() {
            return Err(crate::Error::Shape(format!(
                "encoder parameter {} has shape {:?} vs {:?}",
                p.name,
                p.value.shape(),
                target.value.shape()
            )));
        }
        target.value = p.value.clone();
        copied += 1;
    }
    let expected = dst.iter().filter(|p| p.name.starts_with("encoder.")).count();
    if copied != expected {
        return Err(crate::Error::Invalid(format!(
            "copied {copied} encoder tensors but the target has {expected}"
        )));
    }
    Ok(copied)
}
