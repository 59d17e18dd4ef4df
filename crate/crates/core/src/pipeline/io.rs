//! On-disk formats: binary features, text units, text manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::checkpoint::write_atomic;
use crate::model::FeatureSequence;
use crate::numerics::Tensor;
use crate::units::UnitSequence;

use super::synth::{Dataset, Split};

const FEAT_MAGIC: &[u8; 4] = b"CS2F";
const FEAT_VERSION: u32 = 1;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_features(feats: &[FeatureSequence], feat_dim: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(FEAT_MAGIC);
    out.extend_from_slice(&FEAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(feats.len() as u64).to_le_bytes());
    out.extend_from_slice(&(feat_dim as u32).to_le_bytes());
    for f in feats {
        if f.dim() != feat_dim {
            return Err(Error::Shape(format!(
                "feature width {} differs from file width {feat_dim}",
                f.dim()
            )));
        }
        out.extend_from_slice(&(f.len() as u32).to_le_bytes());
        for &x in f.frames().data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_features(path: &Path, feats: &[FeatureSequence], feat_dim: usize) -> Result<()> {
    write_atomic(path, &encode_features(feats, feat_dim)?)
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureSequence>> {
    let bytes = read_file(path)?;
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(format_err(path, "truncated features file"));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(4)? != FEAT_MAGIC {
        return Err(format_err(path, "missing CS2F magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != FEAT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let raw = take(n * dim * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(FeatureSequence::new(Tensor::new(&[n, dim], data)?)?);
    }
    if pos != bytes.len() {
        return Err(format_err(path, "trailing bytes"));
    }
    Ok(out)
}

pub fn encode_units(units: &[UnitSequence]) -> String {
    let mut s = String::new();
    for u in units {
        writeln!(s, "{u}").unwrap();
    }
    s
}

pub fn write_units(path: &Path, units: &[UnitSequence]) -> Result<()> {
    write_atomic(path, encode_units(units).as_bytes())
}

pub fn read_units(path: &Path) -> Result<Vec<UnitSequence>> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| format_err(path, "invalid utf-8"))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            l.parse()
                .map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// One line of the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: String,
    pub features: PathBuf,
    pub units: PathBuf,
    pub count: usize,
}

/// Index of the splits in a data directory. Paths are relative to the
/// manifest's own directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("split\tfeatures\tunits\tcount\n");
        for e in &self.entries {
            writeln!(
                s,
                "{}\t{}\t{}\t{}",
                e.split,
                e.features.display(),
                e.units.display(),
                e.count
            )
            .unwrap();
        }
        s
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(format_err(path, format!("line {}: expected 4 columns", i + 1)));
            }
            let count = cols[3]
                .parse()
                .map_err(|_| format_err(path, format!("line {}: bad count", i + 1)))?;
            entries.push(ManifestEntry {
                split: cols[0].to_string(),
                features: cols[1].into(),
                units: cols[2].into(),
                count,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = String::from_utf8(read_file(&path)?).map_err(|_| format_err(&path, "invalid utf-8"))?;
        Self::parse(&path, &text)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_NAME), self.to_text().as_bytes())
    }

    pub fn entry(&self, split: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.split == split)
    }
}

/// Writes one split as `<split>.feats` / `<split>.units` under `dir`.
pub fn write_split(dir: &Path, split: &str, data: &Dataset, feat_dim: usize) -> Result<ManifestEntry> {
    let features = PathBuf::from(format!("{split}.feats"));
    let units = PathBuf::from(format!("{split}.units"));
    write_features(&dir.join(&features), &data.features(), feat_dim)?;
    write_units(&dir.join(&units), &data.units())?;
    Ok(ManifestEntry {
        split: split.to_string(),
        features,
        units,
        count: data.len(),
    })
}

/// Loads a split listed in the manifest of `dir`.
pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let manifest = Manifest::read(dir)?;
    let entry = manifest
        .entry(split.name())
        .ok_or_else(|| Error::MissingArtifact(dir.join(format!("{}.feats", split.name()))))?;
    load_entry(dir, entry)
}

pub fn load_entry(dir: &Path, entry: &ManifestEntry) -> Result<Dataset> {
    let feats = read_features(&dir.join(&entry.features))?;
    let units = read_units(&dir.join(&entry.units))?;
    if feats.len() != entry.count || units.len() != entry.count {
        return Err(format_err(
            &dir.join(&entry.units),
            format!(
                "manifest count {} but {} feature and {} unit records",
                entry.count,
                feats.len(),
                units.len()
            ),
        ));
    }
    Dataset::new(feats, units)
}
