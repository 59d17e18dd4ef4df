//! Flat `key = value` configuration with `[section]` headers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::glat::GlancingSchedule;
use crate::model::ModelConfig;
use crate::pipeline::{SynthTaskSpec, TrainConfig};

/// Parsed file: section name to ordered key/value pairs. Keys before the
/// first header belong to the section `""`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub sections: BTreeMap<String, Vec<(String, String)>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut file = ConfigFile::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unclosed section header", i + 1)))?;
                section = name.trim().to_string();
                file.sections.entry(section.clone()).or_default();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            file.sections
                .entry(section.clone())
                .or_default()
                .push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean '{v}' for {key}"))),
    }
}

fn set_data(spec: &mut SynthTaskSpec, key: &str, v: &str) -> Result<()> {
    match key {
        "phones" => spec.phones = num(key, v)?,
        "min_duration" => spec.min_duration = num(key, v)?,
        "max_duration" => spec.max_duration = num(key, v)?,
        "feat_dim" => spec.feat_dim = num(key, v)?,
        "noise" => spec.noise = num(key, v)?,
        "units" => spec.units = num(key, v)?,
        "min_expansion" => spec.min_expansion = num(key, v)?,
        "max_expansion" => spec.max_expansion = num(key, v)?,
        "p_swap" => spec.p_swap = num(key, v)?,
        "min_phones" => spec.min_phones = num(key, v)?,
        "max_phones" => spec.max_phones = num(key, v)?,
        "train" => spec.train = num(key, v)?,
        "valid" => spec.valid = num(key, v)?,
        "test" => spec.test = num(key, v)?,
        "bench" => spec.bench = num(key, v)?,
        "bench_min_phones" => spec.bench_min_phones = num(key, v)?,
        "bench_max_phones" => spec.bench_max_phones = num(key, v)?,
        "seed" => spec.seed = num(key, v)?,
        _ => return Err(Error::UnknownKey(format!("data.{key}"))),
    }
    Ok(())
}

fn set_train(cfg: &mut TrainConfig, section: &str, key: &str, v: &str) -> Result<()> {
    let glance = |cfg: &mut TrainConfig| *cfg.glancing.get_or_insert_with(GlancingSchedule::default);
    match key {
        "steps" => cfg.steps = num(key, v)?,
        "peak_lr" => cfg.peak_lr = num(key, v)?,
        "warmup" => cfg.warmup = num(key, v)?,
        "batch_frames" => cfg.batch_frames = num(key, v)?,
        "beta1" => cfg.beta1 = num(key, v)?,
        "beta2" => cfg.beta2 = num(key, v)?,
        "eps" => cfg.eps = num(key, v)?,
        "clip" => cfg.clip = num(key, v)?,
        "seed" => cfg.seed = num(key, v)?,
        "valid_every" => cfg.valid_every = num(key, v)?,
        "valid_samples" => cfg.valid_samples = num(key, v)?,
        "divergence_factor" => cfg.divergence_factor = num(key, v)?,
        "glancing" if section != "train_ar" => {
            cfg.glancing = if boolean(key, v)? {
                Some(glance(cfg))
            } else {
                None
            }
        }
        "glance_start" | "glance_end" | "glance_decay" if section != "train_ar" => {
            let mut g = glance(cfg);
            match key {
                "glance_start" => g.start_ratio = num(key, v)?,
                "glance_end" => g.end_ratio = num(key, v)?,
                _ => g.decay_steps = num(key, v)?,
            }
            cfg.glancing = Some(GlancingSchedule::new(g.start_ratio, g.end_ratio, g.decay_steps)?);
        }
        _ => return Err(Error::UnknownKey(format!("{section}.{key}"))),
    }
    Ok(())
}

/// Latency benchmark settings.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Lower bucket edges in source frames; the last bucket is open.
    pub edges: Vec<usize>,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            edges: vec![0, 120, 240],
            warmup: 3,
        }
    }
}

/// Which parts of the recipe to use and how many seeds to run.
#[derive(Clone, Debug, PartialEq)]
pub struct RecipeConfig {
    pub pretrain: bool,
    pub kd: bool,
    pub seeds: Vec<u64>,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        RecipeConfig {
            pretrain: true,
            kd: true,
            seeds: vec![1, 2, 3],
        }
    }
}

/// Everything a subcommand may need.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: SynthTaskSpec,
    pub model: ModelConfig,
    pub train_ar: TrainConfig,
    pub train_nar: TrainConfig,
    pub finetune: TrainConfig,
    pub recipe: RecipeConfig,
    pub bench: BenchConfig,
    /// Optional hypothesis file scored by `eval` instead of decoding.
    pub eval_hypotheses: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// The profile used for the experiments: small enough to train every
    /// ablation row on one CPU core.
    pub fn desk() -> Self {
        let model = ModelConfig {
            d_model: 32,
            heads: 4,
            ffn_dim: 64,
            upsample: 4,
            dropout: 0.0,
            max_positions: 1024,
            ..ModelConfig::default()
        };
        let base = TrainConfig {
            steps: 2000,
            peak_lr: 3e-3,
            warmup: 200,
            batch_frames: 400,
            valid_every: 0,
            ..TrainConfig::ar()
        };
        RunConfig {
            data: SynthTaskSpec::default(),
            model,
            train_ar: base.clone(),
            train_nar: TrainConfig {
                steps: 1000,
                glancing: Some(GlancingSchedule::new(0.5, 0.3, 500).unwrap()),
                ..base.clone()
            },
            finetune: TrainConfig {
                steps: 300,
                peak_lr: 1e-3,
                warmup: 30,
                glancing: Some(GlancingSchedule::constant(0.3).unwrap()),
                ..base
            },
            recipe: RecipeConfig::default(),
            bench: BenchConfig::default(),
            eval_hypotheses: None,
        }
    }

    /// Applies a parsed file on top of `self`.
    pub fn apply(&mut self, file: &ConfigFile) -> Result<()> {
        for (section, pairs) in &file.sections {
            for (k, v) in pairs {
                self.set(section, k, v)?;
            }
        }
        Ok(())
    }

    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        match section {
            "data" => set_data(&mut self.data, key, v),
            "model" => self.model.set(key, v).map_err(|e| match e {
                Error::UnknownKey(k) => Error::UnknownKey(format!("model.{k}")),
                other => other,
            }),
            "train_ar" => set_train(&mut self.train_ar, section, key, v),
            "train_nar" => set_train(&mut self.train_nar, section, key, v),
            "finetune" => set_train(&mut self.finetune, section, key, v),
            "recipe" => {
                match key {
                    "pretrain" => self.recipe.pretrain = boolean(key, v)?,
                    "kd" => self.recipe.kd = boolean(key, v)?,
                    "seeds" => {
                        self.recipe.seeds = v
                            .split(',')
                            .map(|s| num(key, s.trim()))
                            .collect::<Result<_>>()?
                    }
                    _ => return Err(Error::UnknownKey(format!("recipe.{key}"))),
                }
                Ok(())
            }
            "bench" => {
                match key {
                    "edges" => {
                        self.bench.edges = v
                            .split(',')
                            .map(|s| num(key, s.trim()))
                            .collect::<Result<_>>()?
                    }
                    "warmup" => self.bench.warmup = num(key, v)?,
                    _ => return Err(Error::UnknownKey(format!("bench.{key}"))),
                }
                Ok(())
            }
            "eval" => match key {
                "hypotheses" => {
                    self.eval_hypotheses = Some(v.to_string());
                    Ok(())
                }
                _ => Err(Error::UnknownKey(format!("eval.{key}"))),
            },
            _ => Err(Error::UnknownKey(if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            })),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::desk();
        cfg.apply(&ConfigFile::read(path)?)?;
        Ok(cfg)
    }

    /// Uses `seed` for data, training and the recipe.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train_ar.seed = seed;
        self.train_nar.seed = seed;
        self.finetune.seed = seed;
        self.recipe.seeds = vec![seed];
    }

    /// Keeps the model's unit and feature sizes in step with the data.
    pub fn sync_model(&mut self) {
        self.model.units = self.data.units;
        self.model.feat_dim = self.data.feat_dim;
    }

    /// The model config rendered as a `[model]` section.
    pub fn model_section(&self) -> String {
        let mut s = String::from("[model]\n");
        for line in self.model.to_text().lines() {
            let (k, v) = line.split_once('=').unwrap();
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}
