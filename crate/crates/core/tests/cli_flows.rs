use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use ctc_s2ut::cli::{run, Command, CommandArgs};

const TINY: &str = "\
[data]
train = 40
valid = 6
test = 10
bench = 4
max_phones = 6
bench_min_phones = 4
bench_max_phones = 12

[model]
d_model = 16
heads = 2
ffn_dim = 32
max_positions = 256

[train_ar]
steps = 6
warmup = 2
batch_frames = 120

[train_nar]
steps = 6
warmup = 2
batch_frames = 120
glance_decay = 6

[finetune]
steps = 4
warmup = 1
batch_frames = 120

[bench]
edges = 0, 30
warmup = 1
";

fn write_cfg(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn args(cfg: &Path, out: &Path, data: Option<&Path>, ckpt: Option<&Path>) -> CommandArgs {
    CommandArgs {
        config: Some(cfg.to_path_buf()),
        seed: None,
        out: out.to_path_buf(),
        ckpt: ckpt.map(Path::to_path_buf),
        data: data.map(Path::to_path_buf),
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(Command::GenData, &args(&cfg, &a, None, None)).unwrap();
    run(Command::GenData, &args(&cfg, &b, None, None)).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 10, "{names:?}");
    for n in names {
        assert_eq!(read(&a.join(&n)), read(&b.join(&n)), "{n:?} differs");
    }
    let manifest = String::from_utf8(read(&a.join("manifest.tsv"))).unwrap();
    for split in ["train", "valid", "test", "bench"] {
        assert!(manifest.contains(&format!("{split}\t")), "{manifest}");
    }
    // A different seed changes the data.
    let c = tmp.path().join("c");
    let mut other = args(&cfg, &c, None, None);
    other.seed = Some(99);
    run(Command::GenData, &other).unwrap();
    assert_ne!(read(&a.join("train.feats")), read(&c.join("train.feats")));
}

#[test]
fn full_pipeline_through_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "");
    let data = tmp.path().join("data");
    let models = tmp.path().join("models");
    let kd = tmp.path().join("kd");
    run(Command::GenData, &args(&cfg, &data, None, None)).unwrap();
    run(Command::TrainAr, &args(&cfg, &models, Some(&data), None)).unwrap();
    assert!(models.join("ar.ckpt").exists());
    let s = run(Command::Distill, &args(&cfg, &kd, Some(&data), Some(&models))).unwrap();
    assert!(s.contains("distilled 40 targets"), "{s}");
    assert!(kd.join("train.distilled.units").exists());

    run(Command::TrainNar, &args(&cfg, &models, Some(&kd), Some(&models))).unwrap();
    run(Command::FinetuneNmla, &args(&cfg, &models, Some(&kd), Some(&models))).unwrap();
    assert!(models.join("nar2.ckpt").exists());

    let ar_log = String::from_utf8(read(&models.join("ar_metrics.tsv"))).unwrap();
    let nar_log = String::from_utf8(read(&models.join("nar1_metrics.tsv"))).unwrap();
    assert!(ar_log.lines().all(|l| l.split('\t').count() == 4));
    assert!(nar_log.lines().all(|l| l.split('\t').count() == 6));
    assert_eq!(ar_log.lines().count(), 7);

    let eval_out = tmp.path().join("eval");
    let s = run(Command::Eval, &args(&cfg, &eval_out, Some(&data), Some(&models))).unwrap();
    assert!(s.starts_with("unit-BLEU "), "{s}");
    assert!(eval_out.join("hypotheses.units").exists());

    let bench_out = tmp.path().join("bench");
    let s = run(Command::Bench, &args(&cfg, &bench_out, Some(&data), Some(&models))).unwrap();
    assert!(s.contains("# hardware:"), "{s}");
    assert!(bench_out.join("bench.tsv").exists());
}

#[test]
fn eval_of_the_references_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = write_cfg(tmp.path(), "");
    run(Command::GenData, &args(&cfg, &data, None, None)).unwrap();
    let hyp = data.join("test.units");
    let cfg = write_cfg(tmp.path(), &format!("[eval]\nhypotheses = {}\n", hyp.display()));
    let s = run(Command::Eval, &args(&cfg, &tmp.path().join("e"), Some(&data), None)).unwrap();
    assert_eq!(s.trim(), "unit-BLEU 1.0000");
}

fn bin(dir: &Path, argv: &[&str]) -> (bool, String) {
    let out = Proc::new(env!("CARGO_BIN_EXE_ctc-s2ut"))
        .args(argv)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    (out.status.success(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    write_cfg(tmp.path(), "[model]\nwidth = 3\n");
    let (ok, err) = bin(tmp.path(), &["gen-data", "--config", "tiny.cfg", "--out", "d"]);
    assert!(!ok);
    assert!(err.contains("E_UNKNOWN_KEY") && err.contains("model.width"), "{err}");
}

#[test]
fn missing_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    write_cfg(tmp.path(), "");
    let (ok, _) = bin(tmp.path(), &["gen-data", "--config", "tiny.cfg", "--out", "d"]);
    assert!(ok);
    let (ok, err) = bin(
        tmp.path(),
        &["distill", "--config", "tiny.cfg", "--data", "d", "--ckpt", "nowhere.ckpt", "--out", "k"],
    );
    assert!(!ok);
    assert!(err.contains("E_MISSING") && err.contains("nowhere.ckpt"), "{err}");
    let (ok, err) = bin(tmp.path(), &["eval", "--config", "missing.cfg", "--data", "d"]);
    assert!(!ok);
    assert!(err.contains("E_MISSING"), "{err}");
}
