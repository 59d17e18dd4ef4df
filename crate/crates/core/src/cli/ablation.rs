//! The five-row technique ablation and the full two-stage recipe.

use std::fmt::Write as _;
use std::path::Path;

use log::info;

use super::config::RunConfig;
use crate::error::Result;
use crate::model::{transfer_encoder, ArModel, NarModel, Variant};
use crate::pipeline::synth::{mix_seed, Dataset};
use crate::pipeline::train::{evaluate_ar, evaluate_nar};
use crate::pipeline::{distill, train_ar, train_nar, Stage, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub pretrain: bool,
    pub glat: bool,
    pub kd: bool,
    pub nmla: bool,
    pub bleu: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub seed: u64,
    /// Autoregressive teacher on the same test set.
    pub ar_bleu: f64,
    pub rows: Vec<AblationRow>,
}

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

impl AblationTable {
    pub fn row(&self, pretrain: bool, glat: bool, kd: bool, nmla: bool) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| (r.pretrain, r.glat, r.kd, r.nmla) == (pretrain, glat, kd, nmla))
    }

    pub fn no_pretrain(&self) -> f64 {
        self.row(false, true, true, false).map_or(f64::NAN, |r| r.bleu)
    }

    pub fn no_glat(&self) -> f64 {
        self.row(true, false, true, false).map_or(f64::NAN, |r| r.bleu)
    }

    pub fn no_kd(&self) -> f64 {
        self.row(true, true, false, false).map_or(f64::NAN, |r| r.bleu)
    }

    pub fn full_stage1(&self) -> f64 {
        self.row(true, true, true, false).map_or(f64::NAN, |r| r.bleu)
    }

    pub fn full_nmla(&self) -> f64 {
        self.row(true, true, true, true).map_or(f64::NAN, |r| r.bleu)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("seed {}  (AR baseline unit-BLEU {:.4})\n", self.seed, self.ar_bleu);
        s.push_str("Pretrain  GLAT  KD   NMLA  unit-BLEU\n");
        for r in &self.rows {
            writeln!(
                s,
                "{:<9} {:<5} {:<4} {:<5} {:.4}",
                mark(r.pretrain),
                mark(r.glat),
                mark(r.kd),
                mark(r.nmla),
                r.bleu
            )
            .unwrap();
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("seed\tpretrain\tglat\tkd\tnmla\tunit_bleu\n");
        for r in &self.rows {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{:.6}",
                self.seed, r.pretrain, r.glat, r.kd, r.nmla, r.bleu
            )
            .unwrap();
        }
        writeln!(s, "{}\tar\t-\t-\t-\t{:.6}", self.seed, self.ar_bleu).unwrap();
        s
    }
}

/// Data the recipe works on.
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub valid: Option<&'a Dataset>,
    pub test: &'a Dataset,
}

/// Models produced by one full run, for reuse by the benchmark.
pub struct RecipeOutput {
    pub table: AblationTable,
    pub ar: ArModel,
    pub nar_stage1: NarModel,
    pub nar_full: NarModel,
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed: mix_seed(cfg.seed, seed),
        ..cfg.clone()
    }
}

fn log_path(dir: Option<&Path>, name: &str) -> Option<std::path::PathBuf> {
    dir.map(|d| d.join(name))
}

/// Trains the teacher and all five ablation rows for one seed.
pub fn run_ablation(
    cfg: &RunConfig,
    data: &Splits,
    seed: u64,
    log_dir: Option<&Path>,
) -> Result<RecipeOutput> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.units = cfg.data.units;
    model_cfg.feat_dim = cfg.data.feat_dim;

    model_cfg.variant = Variant::Ar;
    let mut ar = ArModel::new(&model_cfg, mix_seed(seed, 1))?;
    train_ar(
        &mut ar,
        &with_seed(&cfg.train_ar, seed),
        data.train,
        data.valid,
        log_path(log_dir, &format!("seed{seed}_ar.tsv")).as_deref(),
    )?;
    let ar_bleu = evaluate_ar(&ar, data.test)?;
    info!("seed {seed}: AR unit-BLEU {ar_bleu:.4}");

    let (kd_train, report) = distill(&ar, data.train)?;
    info!("seed {seed}: distilled {} targets ({} fallbacks)", report.samples, report.empty_fallbacks);

    model_cfg.variant = Variant::Nar;
    let nar_seed = mix_seed(seed, 2);
    let stage1 = with_seed(&cfg.train_nar, seed);
    let no_glat = TrainConfig {
        glancing: None,
        ..stage1.clone()
    };
    let mut rows = Vec::new();
    let run_row = |pretrain: bool, glat: bool, kd: bool| -> Result<(NarModel, f64)> {
        let mut nar = NarModel::new(&model_cfg, nar_seed)?;
        if pretrain {
            transfer_encoder(&ar, &mut nar)?;
        }
        let tc = if glat { &stage1 } else { &no_glat };
        let train = if kd { &kd_train } else { data.train };
        let name = format!(
            "seed{seed}_nar1_p{}_g{}_k{}.tsv",
            u8::from(pretrain),
            u8::from(glat),
            u8::from(kd)
        );
        train_nar(
            &mut nar,
            Stage::NarStage1,
            tc,
            train,
            data.valid,
            log_path(log_dir, &name).as_deref(),
        )?;
        let bleu = evaluate_nar(&nar, data.test)?;
        info!("seed {seed}: pretrain={pretrain} glat={glat} kd={kd}: {bleu:.4}");
        Ok((nar, bleu))
    };
    for (p, g, k) in [(false, true, true), (true, false, true), (true, true, false)] {
        let (_, bleu) = run_row(p, g, k)?;
        rows.push(AblationRow {
            pretrain: p,
            glat: g,
            kd: k,
            nmla: false,
            bleu,
        });
    }
    let (nar_stage1, bleu) = run_row(true, true, true)?;
    rows.push(AblationRow {
        pretrain: true,
        glat: true,
        kd: true,
        nmla: false,
        bleu,
    });

    let mut nar_full = nar_stage1.clone();
    train_nar(
        &mut nar_full,
        Stage::NarStage2,
        &with_seed(&cfg.finetune, seed),
        &kd_train,
        data.valid,
        log_path(log_dir, &format!("seed{seed}_nar2.tsv")).as_deref(),
    )?;
    let bleu = evaluate_nar(&nar_full, data.test)?;
    info!("seed {seed}: full + NMLA: {bleu:.4}");
    rows.push(AblationRow {
        pretrain: true,
        glat: true,
        kd: true,
        nmla: true,
        bleu,
    });

    Ok(RecipeOutput {
        table: AblationTable { seed, ar_bleu, rows },
        ar,
        nar_stage1,
        nar_full,
    })
}
