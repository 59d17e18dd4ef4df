//! Sequence-level distillation: replace targets with the teacher's outputs.

use log::info;

use super::synth::Dataset;
use crate::error::Result;
use crate::model::ArModel;

#[derive(Clone, Debug, PartialEq)]
pub struct DistillReport {
    pub samples: usize,
    /// Teacher outputs that were empty and fell back to the original target.
    pub empty_fallbacks: usize,
    pub truncated: usize,
}

/// Greedily decodes every source with `teacher`. Sources are untouched.
pub fn distill(teacher: &ArModel, data: &Dataset) -> Result<(Dataset, DistillReport)> {
    let mut units = Vec::with_capacity(data.len());
    let mut report = DistillReport {
        samples: data.len(),
        empty_fallbacks: 0,
        truncated: 0,
    };
    for s in &data.samples {
        let out = teacher.generate(&s.features)?;
        report.truncated += usize::from(out.stats.truncated);
        if out.units.is_empty() {
            report.empty_fallbacks += 1;
            units.push(s.units.clone());
        } else {
            units.push(out.units);
        }
    }
    if report.empty_fallbacks > 0 {
        info!(
            "distillation kept {} original targets where the teacher output was empty",
            report.empty_fallbacks
        );
    }
    Ok((data.with_units(units)?, report))
}
