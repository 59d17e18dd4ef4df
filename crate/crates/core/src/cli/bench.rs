//! Batch-size-1 latency comparison of the two decoders.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{ArModel, NarModel};
use crate::pipeline::Dataset;

/// Per-sample decode record.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTiming {
    pub frames: usize,
    pub ar: Duration,
    pub nar: Duration,
    /// Units emitted by the autoregressive decoder.
    pub ar_len: usize,
    /// Decoder passes the autoregressive model ran.
    pub ar_passes: usize,
    pub ar_truncated: bool,
    pub nar_len: usize,
    pub nar_passes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketRow {
    pub lo: usize,
    /// Exclusive upper edge; `None` for the open last bucket.
    pub hi: Option<usize>,
    pub count: usize,
    pub ar_mean: Option<Duration>,
    pub nar_mean: Option<Duration>,
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub hardware: String,
    pub rows: Vec<BucketRow>,
    pub overall_speedup: f64,
    pub samples: Vec<SampleTiming>,
}

/// CPU model and core count, recorded so numbers are read in context.
pub fn hardware_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}, {cores} logical cores, single-threaded decode, batch size 1")
}

fn mean(xs: &[Duration]) -> Option<Duration> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<Duration>() / xs.len() as u32)
    }
}

/// Decodes every sample with both models, one at a time, after `warmup`
/// discarded decodes per model. `edges` are ascending lower bucket edges.
pub fn bench_latency(
    ar: &ArModel,
    nar: &NarModel,
    data: &Dataset,
    edges: &[usize],
    warmup: usize,
) -> Result<BenchReport> {
    ar.config().check_encoder_compatible(nar.config())?;
    if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("bucket edges must be non-empty and strictly increasing".into()));
    }
    if data.is_empty() {
        return Err(Error::Invalid("benchmark set is empty".into()));
    }
    for s in data.samples.iter().cycle().take(warmup) {
        black_box(ar.generate(&s.features)?);
        black_box(nar.translate(&s.features)?);
    }
    let mut samples = Vec::with_capacity(data.len());
    for s in &data.samples {
        let t = Instant::now();
        let a = black_box(ar.generate(&s.features)?);
        let ar_time = t.elapsed();
        let t = Instant::now();
        let (units, stats) = black_box(nar.translate(&s.features)?);
        let nar_time = t.elapsed();
        samples.push(SampleTiming {
            frames: s.features.len(),
            ar: ar_time,
            nar: nar_time,
            ar_len: a.units.len(),
            ar_passes: a.stats.decoder_passes,
            ar_truncated: a.stats.truncated,
            nar_len: units.len(),
            nar_passes: stats.decoder_passes,
        });
    }
    let mut rows = Vec::new();
    for (i, &lo) in edges.iter().enumerate() {
        let hi = edges.get(i + 1).copied();
        let inside: Vec<&SampleTiming> = samples
            .iter()
            .filter(|s| s.frames >= lo && hi.is_none_or(|h| s.frames < h))
            .collect();
        let ar_mean = mean(&inside.iter().map(|s| s.ar).collect::<Vec<_>>());
        let nar_mean = mean(&inside.iter().map(|s| s.nar).collect::<Vec<_>>());
        let speedup = match (ar_mean, nar_mean) {
            (Some(a), Some(n)) if n > Duration::ZERO => Some(a.as_secs_f64() / n.as_secs_f64()),
            _ => None,
        };
        rows.push(BucketRow {
            lo,
            hi,
            count: inside.len(),
            ar_mean,
            nar_mean,
            speedup,
        });
    }
    let ar_total: Duration = samples.iter().map(|s| s.ar).sum();
    let nar_total: Duration = samples.iter().map(|s| s.nar).sum();
    Ok(BenchReport {
        hardware: hardware_description(),
        rows,
        overall_speedup: ar_total.as_secs_f64() / nar_total.as_secs_f64().max(1e-12),
        samples,
    })
}

fn range_label(r: &BucketRow) -> String {
    match r.hi {
        Some(h) => format!("[{}, {})", r.lo, h),
        None => format!("[{}, inf)", r.lo),
    }
}

fn ms(d: Option<Duration>) -> String {
    d.map_or("-".into(), |d| format!("{:.3}", d.as_secs_f64() * 1e3))
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("# hardware: {}\n", self.hardware);
        writeln!(
            s,
            "{:<14} {:>6} {:>12} {:>12} {:>9}",
            "frames", "count", "AR ms", "NAR ms", "speedup"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{:<14} {:>6} {:>12} {:>12} {:>9}",
                range_label(r),
                r.count,
                ms(r.ar_mean),
                ms(r.nar_mean),
                r.speedup.map_or("-".into(), |x| format!("{x:.2}x"))
            )
            .unwrap();
        }
        writeln!(s, "overall speedup {:.2}x", self.overall_speedup).unwrap();
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("# hardware: {}\n", self.hardware);
        s.push_str("lo\thi\tcount\tar_ms\tnar_ms\tspeedup\n");
        for r in &self.rows {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.lo,
                r.hi.map_or("inf".into(), |h| h.to_string()),
                r.count,
                ms(r.ar_mean),
                ms(r.nar_mean),
                r.speedup.map_or("-".into(), |x| format!("{x:.4}"))
            )
            .unwrap();
        }
        writeln!(s, "all\t-\t{}\t-\t-\t{:.4}", self.samples.len(), self.overall_speedup).unwrap();
        s
    }

    /// Speedups of non-empty buckets, in order.
    pub fn speedups(&self) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.speedup).collect()
    }
}
