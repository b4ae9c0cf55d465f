use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdgcount_core::data::Image;
use sdgcount_core::model::{CountingModel, ModelConfig};
use sdgcount_core::synthbench::{generate_domain_pair, write_dataset, SceneSpec};
use sdgcount_core::train::{overfit_probe, TrainState};
use sdgcount_core::RunConfig;

fn sdgcount(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdgcount"))
        .args(args)
        .env_remove("SDGCOUNT_CACHE")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
[model]
backbone = "tiny"
memory_count = 8
memory_dim = 16

[augment]
crop_size = 32

[train]
epochs = 2
batch_size = 2
checkpoint_every = 1
"#;

/// Synthetic source/target datasets (32×32) under `dir`.
fn synth(dir: &Path) -> (PathBuf, PathBuf) {
    let o = sdgcount(&["synth", "--train", "3", "--test", "2", "--size", "32", "--out", s(dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    (dir.join("source/manifest.jsonl"), dir.join("target/manifest.jsonl"))
}

#[test]
fn config_dump_matches_defaults() {
    let o = sdgcount(&["config", "dump"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), RunConfig::default().to_toml_string());
    let o = sdgcount(&["config", "dump", "--seed", "7"]);
    assert!(stdout(&o).contains("seed = 7\n"));
}

#[test]
fn config_errors_exit_2_and_list_every_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nmemroy_count = 3\n[train]\nlearning_rate = 1.0\n").unwrap();
    let o = sdgcount(&["config", "check", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("memroy_count") && err.contains("learning_rate"), "{err}");

    std::fs::write(&cfg, "[train]\nbatch_size = 0\nmax_lr = -1.0\n").unwrap();
    let o = sdgcount(&["config", "check", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("batch_size") && err.contains("max_lr"), "{err}");

    let o = sdgcount(&["config", "check", "--device", "cuda"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, target) = synth(dir.path());
    let o = sdgcount(&["eval", "--checkpoint", "/nonexistent.ckpt", "--manifest", s(&target)]);
    assert_eq!(o.status.code(), Some(3));
    let o = sdgcount(&["predict", "--checkpoint", "/nonexistent.ckpt", "--image", "/nonexistent.png"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn prepare_is_idempotent_and_lists_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let (source, _) = synth(dir.path());
    let out = dir.path().join("targets");
    let o = sdgcount(&["prepare", "--manifest", s(&source), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("3 written, 0 up to date"));
    let npy = std::fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "npy").count();
    assert_eq!(npy, 6);
    let o = sdgcount(&["prepare", "--manifest", s(&source), "--out", s(&out)]);
    assert!(stdout(&o).starts_with("0 written, 3 up to date"));

    std::fs::write(dir.path().join("source/source_0001.json"), "{ broken").unwrap();
    std::fs::write(dir.path().join("source/source_0002.json"), "[]").unwrap();
    let o = sdgcount(&["prepare", "--manifest", s(&source), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("source_0001.json") && err.contains("source_0002.json"), "{err}");
}

#[test]
fn prepare_falls_back_to_cache_dir() {
    let dir = tempfile::tempdir().unwrap();
    let (source, _) = synth(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_sdgcount"))
        .args(["prepare", "--manifest", s(&source)])
        .env("SDGCOUNT_CACHE", dir.path().join("cache"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("cache/targets/source_0000.density.npy").is_file());
    let o = sdgcount(&["prepare", "--manifest", s(&source)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_resume_eval_visualize() {
    let dir = tempfile::tempdir().unwrap();
    let (source, target) = synth(dir.path());
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let o = sdgcount(&["train", "--config", s(&cfg), "--manifest", s(&source), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = run.join("epoch_0002.ckpt");
    assert_eq!(stdout(&o).trim(), s(&ck));
    assert!(run.join("epoch_0001.ckpt").is_file() && run.join("last.ckpt").is_file());
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    // resuming a finished run has nothing left to do
    let o = sdgcount(&["train", "--resume", s(&ck), "--manifest", s(&source), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let eval = |sub: &str| {
        let out = dir.path().join(sub);
        let o = sdgcount(&["eval", "--checkpoint", s(&ck), "--manifest", s(&target), "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        (std::fs::read(out.join("report.json")).unwrap(), std::fs::read(out.join("counts.csv")).unwrap())
    };
    let a = eval("e1");
    assert_eq!(a, eval("e2"));
    let report: serde_json::Value = serde_json::from_slice(&a.0).unwrap();
    assert_eq!(report["per_image"].as_array().unwrap().len(), 2);

    let img = dir.path().join("target/target_0000.png");
    let viz = dir.path().join("viz");
    let o = sdgcount(&[
        "visualize",
        "--checkpoint",
        s(&ck),
        "--image",
        s(&img),
        "--annotation",
        s(&dir.path().join("target/target_0000.json")),
        "--out",
        s(&viz),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["density.png", "pcm_pred.png", "pcm_binary.png", "pcm_gt.png"] {
        let r = Image::load(&viz.join(name)).unwrap();
        assert_eq!((r.height, r.width), (32, 32), "{name}");
    }
}

#[test]
fn predict_counts_an_overfit_scene() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        height: 32,
        width: 32,
        count_range: (5, 5),
        ..SceneSpec::default()
    };
    let pair = generate_domain_pair(&spec, 2, 1, 4.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let manifest = write_dataset(&dir.path().join("scene"), &pair.source, "train", None).unwrap();
    // train on the 8-bit images exactly as written
    let records = sdgcount_core::data::load_manifest(&manifest).unwrap().records;
    let samples = sdgcount_core::data::io::load_records(&records, 4.0, true).unwrap();

    let mut run = RunConfig::default();
    run.model = ModelConfig::tiny();
    run.augment.crop_size = 32;
    run.train.max_lr = 0.1;
    let mut model = CountingModel::new(&run.model, run.train.seed).unwrap();
    overfit_probe(&mut model, &samples, 500, &run).unwrap();
    let ck = dir.path().join("probe.ckpt");
    TrainState::new(model, run.train.weight_decay).save(&ck, &run).unwrap();

    let o = sdgcount(&["predict", "--checkpoint", s(&ck), "--image", s(&records[0].image), "--out", s(&dir.path().join("pred"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let count: f64 = stdout(&o).trim().parse().unwrap();
    assert!((count - 5.0).abs() <= 1.0, "predicted {count}");
    assert!(dir.path().join("pred/density.png").is_file());
}
