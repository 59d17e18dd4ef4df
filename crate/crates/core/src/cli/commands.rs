//! The subcommands behind the command-line tool. Each one reads inputs from
//! `--data` / `--ckpt`, writes under `--out` and returns a printable summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;

use super::ablation::{run_ablation, Splits};
use super::bench::bench_latency;
use super::config::RunConfig;
use crate::bleu::unit_bleu;
use crate::error::{Error, Result};
use crate::model::checkpoint::{self, write_atomic};
use crate::model::{transfer_encoder, ArModel, ModelConfig, NarModel, Variant};
use crate::pipeline::io::{load_entry, load_split, read_units, write_split, write_units, Manifest, ManifestEntry};
use crate::pipeline::synth::{infeasible_fraction, Split};
use crate::pipeline::train::{decode_ar, decode_nar, Stage};
use crate::pipeline::{distill, sweep_lambda, train_ar, train_nar, SynthTask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainAr,
    Distill,
    TrainNar,
    FinetuneNmla,
    Eval,
    Ablate,
    Bench,
}

/// Paths and overrides shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct CommandArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub ckpt: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

pub const AR_CKPT: &str = "ar.ckpt";
pub const NAR1_CKPT: &str = "nar1.ckpt";
pub const NAR2_CKPT: &str = "nar2.ckpt";
pub const LAMBDA_CANDIDATES: &[usize] = &[1, 2, 3, 4, 6, 8];

impl CommandArgs {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::desk(),
        };
        if let Some(s) = self.seed {
            cfg.override_seed(s);
        }
        cfg.sync_model();
        Ok(cfg)
    }

    fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("--data is required for this command".into()))
    }

    fn ckpt_path(&self, default_name: &str) -> PathBuf {
        match &self.ckpt {
            Some(p) if p.is_dir() => p.join(default_name),
            Some(p) => p.clone(),
            None => self.out.join(default_name),
        }
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

fn model_config(cfg: &RunConfig, variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        ..cfg.model.clone()
    }
}

pub fn run(cmd: Command, args: &CommandArgs) -> Result<String> {
    let cfg = args.run_config()?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    match cmd {
        Command::GenData => gen_data(&cfg, args),
        Command::TrainAr => cmd_train_ar(&cfg, args),
        Command::Distill => cmd_distill(&cfg, args),
        Command::TrainNar => cmd_train_nar(&cfg, args),
        Command::FinetuneNmla => cmd_finetune(&cfg, args),
        Command::Eval => cmd_eval(&cfg, args),
        Command::Ablate => cmd_ablate(&cfg, args),
        Command::Bench => cmd_bench(&cfg, args),
    }
}

fn gen_data(cfg: &RunConfig, args: &CommandArgs) -> Result<String> {
    let task = SynthTask::new(&cfg.data)?;
    let mut manifest = Manifest::default();
    let mut summary = String::new();
    let mut train = None;
    for split in Split::ALL {
        let data = task.generate(split);
        manifest
            .entries
            .push(write_split(&args.out, split.name(), &data, cfg.data.feat_dim)?);
        writeln!(
            summary,
            "{}: {} samples, {} frames",
            split.name(),
            data.len(),
            data.total_frames()
        )
        .unwrap();
        if split == Split::Train {
            train = Some(data);
        }
    }
    manifest.write(&args.out)?;
    let train = train.unwrap();
    let (chosen, table) = sweep_lambda(&train, LAMBDA_CANDIDATES, 0.02);
    let mut tsv = String::from("lambda\tinfeasible_fraction\n");
    for (l, f) in &table {
        writeln!(tsv, "{l}\t{f:.6}").unwrap();
    }
    write_atomic(&args.out.join("lambda.tsv"), tsv.as_bytes())?;
    let frac = infeasible_fraction(&train, cfg.model.upsample);
    if frac >= 0.02 {
        warn!(
            "{:.1}% of training samples are CTC-infeasible at upsample factor {}",
            frac * 100.0,
            cfg.model.upsample
        );
    }
    writeln!(
        summary,
        "infeasible at lambda={}: {:.2}%; smallest lambda under 2%: {}",
        cfg.model.upsample,
        frac * 100.0,
        chosen.map_or("none".into(), |l| l.to_string())
    )
    .unwrap();
    Ok(summary)
}

fn cmd_train_ar(cfg: &RunConfig, args: &CommandArgs) -> Result<String> {
    let dir = args.data_dir()?;
    let train = load_split(dir, Split::Train)?;
    let valid = load_split(dir, Split::Valid).ok();
    let mut model = ArModel::new(&model_config(cfg, Variant::Ar), cfg.train_ar.seed)?;
    let report = train_ar(
        &mut model,
        &cfg.train_ar,
        &train,
        valid.as_ref(),
        Some(&args.out.join("ar_metrics.tsv")),
    )?;
    let path = args.out.join(AR_CKPT);
    model.save(&path)?;
    Ok(format!(
        "trained AR for {} steps, final loss {:.4}; wrote {}\n",
        report.metrics.len(),
        report.final_loss(),
        path.display()
    ))
}

fn cmd_distill(cfg: &RunConfig, args: &CommandArgs) -> Result<String> {
    let dir = args.data_dir()?;
    let ckpt = require(args.ckpt_path(AR_CKPT))?;
    let teacher = ArModel::load(&ckpt, Some(&model_config(cfg, Variant::Ar)))?;
    let manifest = Manifest::read(dir)?;
    let entry = manifest
        .entry(Split::Train.name())
        .ok_or_else(|| Error::MissingArtifact(dir.join("train.feats")))?;
    let train = load_entry(dir, entry)?;
    let (distilled, report) = distill(&teacher, &train)?;
    let units_name = PathBuf::from("train.distilled.units");
    write_units(&args.out.join(&units_name), &distilled.units())?;
    let abs = std::fs::canonicalize(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Manifest::default();
    for e in &manifest.entries {
        let mut e = ManifestEntry {
            features: abs.join(&e.features),
            units: abs.join(&e.units),
            ..e.clone()
        };
        if e.split == Split::Train.name() {
            e.units = units_name.clone();
        }
        out.entries.push(e);
    }
    out.write(&args.out)?;
    Ok(format!(
        "distilled {} targets ({} empty outputs kept the original, {} truncated)\n",
        report.samples, report.empty_fallbacks, report.truncated
    ))
}

fn cmd_train_nar(cfg: &RunConfig, args: &CommandArgs) -> Result<String> {
    let dir = args.data_dir()?;
    let train = load_split(dir, Split::Train)?;
    let valid = load_split(dir, Split::Valid).ok();
    let mut model = NarModel::new(&model_config(cfg, Variant::Nar), cfg.train_nar.seed)?;
    let mut note = String::from("no encoder pretraining");
    if cfg.recipe.pretrain {
        let ckpt = require(args.ckpt_path(AR_CKPT))?;
        let ar = ArModel::load(&ckpt, Some(&model_config(cfg, Variant::Ar)))?;
        let n = transfer_encoder(&ar, &mut model)?;
        note = format!("encoder initialized from {} ({n} tensors)", ckpt.display());
    }
    let report = train_nar(
        &mut model,
        Stage::NarStage1,
        &cfg.train_nar,
        &train,
        valid.as_ref(),
        Some(&args.out.join("nar1_metrics.tsv")),
    )?;
    let path = args.out.join(NAR1_CKPT);
    model.save(&path)?;
    Ok(format!(
        "{note}; stage 1 for {} steps, final loss {:.4}, {} infeasible samples skipped; wrote {}\n",
        report.metrics.len(),
        report.final_loss(),
        report.skipped_infeasible,
        path.display()
    ))
}

fn cmd_finetune(cfg: &RunConfig, args: &CommandArgs) -> Result<String> {
    let dir = args.data_dir()?;
    let ckpt = require(args.ckpt_path(NAR1_CKPT))?;
    let mut model = NarModel::load(&ckpt, Some(&model_config(cfg, Variant::Nar)))?;
    let train = load_split(dir, Split::Train)?;
    let valid = load_split(dir, Split::Valid).ok();
    let report = train_nar(
        &mut model,
        Stage::NarStage2,
        &cfg.finetune,
        &train,
        valid.as_ref(),
        Some(&args.out.join("nar2_metrics.tsv")),
    )?;
    let path = args.out.join(NAR2_CKPT);
    model.save(&path)?;
    Ok(format!(
        "stage 2 for {} steps, final loss {:.4}; wrote {}\n",
        report.metrics.len(),
        report.final_loss(),
        path.display()
    ))
}

fn cmd_eval(cfg: &RunConfig, args: &CommandArgs) -> Result<String> {
    let dir = args.data_dir()?;
    let test = load_split(dir, Split::Test)?;
    let hyps = if let Some(h) = &cfg.eval_hypotheses {
        read_units(&require(PathBuf::from(h))?)?
    } else {
        let path = require(args.ckpt_path(NAR2_CKPT))?;
        let variant = checkpoint::load(&path, None)?.config.variant;
        match variant {
            Variant::Ar => decode_ar(&ArModel::load(&path, None)?, &test)?,
            Variant::Nar => decode_nar(&NarModel::load(&path, None)?, &test)?,
        }
    };
    let bleu = unit_bleu(&hyps, &test.units())?;
    write_units(&args.out.join("hypotheses.units"), &hyps)?;
    write_atomic(
        &args.out.join("eval.tsv"),
        format!("split\tsamples\tunit_bleu\ntest\t{}\t{bleu:.6}\n", test.len()).as_bytes(),
    )?;
    Ok(format!("unit-BLEU {bleu:.4}\n"))
}

fn cmd_ablate(cfg: &RunConfig, args: &CommandArgs) -> Result<String> {
    let dir = args.data_dir()?;
    let train = load_split(dir, Split::Train)?;
    let valid = load_split(dir, Split::Valid).ok();
    let test = load_split(dir, Split::Test)?;
    let splits = Splits {
        train: &train,
        valid: valid.as_ref(),
        test: &test,
    };
    let (mut text, mut tsv) = (String::new(), String::new());
    for (i, &seed) in cfg.recipe.seeds.iter().enumerate() {
        let out = run_ablation(cfg, &splits, seed, Some(&args.out))?;
        text.push_str(&out.table.to_text());
        text.push('\n');
        let t = out.table.to_tsv();
        tsv.push_str(if i == 0 { &t } else { t.split_once('\n').unwrap().1 });
    }
    write_atomic(&args.out.join("ablation.txt"), text.as_bytes())?;
    write_atomic(&args.out.join("ablation.tsv"), tsv.as_bytes())?;
    Ok(text)
}

fn cmd_bench(cfg: &RunConfig, args: &CommandArgs) -> Result<String> {
    let dir = args.data_dir()?;
    let data = load_split(dir, Split::Bench)?;
    let ar = ArModel::load(&require(args.ckpt_path(AR_CKPT))?, None)?;
    let nar_path = args.ckpt_path(NAR2_CKPT);
    let nar_path = if nar_path.exists() {
        nar_path
    } else {
        require(args.ckpt_path(NAR1_CKPT))?
    };
    let nar = NarModel::load(&nar_path, None)?;
    let report = bench_latency(&ar, &nar, &data, &cfg.bench.edges, cfg.bench.warmup)?;
    let text = report.to_text();
    write_atomic(&args.out.join("bench.txt"), text.as_bytes())?;
    write_atomic(&args.out.join("bench.tsv"), report.to_tsv().as_bytes())?;
    Ok(text)
}
