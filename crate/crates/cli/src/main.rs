use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdgcount_core::data::io::{load_records, prepare_targets, LabeledImage};
use sdgcount_core::data::{build_splits, generate_pcm_gt, load_manifest, Image, ManifestRecord, PointAnnotation};
use sdgcount_core::eval::{evaluate, ScaledModel};
use sdgcount_core::model::CountingModel;
use sdgcount_core::synthbench::{generate_domain_pair, write_dataset, DomainTransform, SceneSpec};
use sdgcount_core::train::{load_model, train_until, Sink, TrainState};
use sdgcount_core::{Error, Result, RunConfig};

mod render;

const CACHE_ENV: &str = "SDGCOUNT_CACHE";

#[derive(Parser)]
#[command(name = "sdgcount", version, about = "Domain-generalized crowd counting")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize density and patch-map targets for a manifest.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train a model; writes checkpoints and `train_log.jsonl` to `--out`.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Manifest split used for training; when absent from the manifest
        /// a seeded partition by `data.train_fraction` is used.
        #[arg(long, default_value = "train")]
        split: String,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes `report.json` (and `counts.csv`) to `--out`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print the predicted count of one image; renderings go to `--out` if given.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Render density heat-map and patch-map overlays into `--out`.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Point annotation; adds a ground-truth patch-map panel.
        #[arg(long)]
        annotation: Option<PathBuf>,
    },
    /// Generate a synthetic source/target dataset pair.
    Synth {
        #[arg(long, default_value_t = 32)]
        train: usize,
        #[arg(long, default_value_t = 16)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, value_enum, default_value_t = Shift::Haze)]
        transform: Shift,
        #[arg(long, default_value_t = 0.6)]
        strength: f64,
    },
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the effective configuration as TOML.
    Dump,
    /// Validate the configuration and print its hash.
    Check,
}

#[derive(Clone, Copy, ValueEnum)]
enum Shift {
    Identity,
    ColorShift,
    Haze,
    BrightnessContrast,
}

impl From<Shift> for DomainTransform {
    fn from(s: Shift) -> Self {
        match s {
            Shift::Identity => DomainTransform::Identity,
            Shift::ColorShift => DomainTransform::ColorShift,
            Shift::Haze => DomainTransform::Haze,
            Shift::BrightnessContrast => DomainTransform::BrightnessContrast,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Format { .. } => 3,
        Error::Shape(_) | Error::InvalidArgument(_) | Error::NonFinite { .. } => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.device != "cpu" {
        return Err(Error::Config(vec![format!("--device {}: only `cpu` is supported", cli.device)]));
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let out = cli.out.as_deref();
    match cli.command {
        Command::Prepare { manifest } => cmd_prepare(&cfg, &manifest, out),
        Command::Train { manifest, split, resume } => cmd_train(cfg, &manifest, &split, resume.as_deref(), out),
        Command::Eval {
            checkpoint,
            manifest,
            split,
        } => cmd_eval(&cfg, &checkpoint, &manifest, &split, out),
        Command::Predict { checkpoint, image } => cmd_predict(&checkpoint, &image, out),
        Command::Visualize {
            checkpoint,
            image,
            annotation,
        } => cmd_visualize(&cfg, &checkpoint, &image, annotation.as_deref(), out),
        Command::Synth {
            train,
            test,
            size,
            transform,
            strength,
        } => cmd_synth(&cfg, train, test, size, transform.into(), strength, out),
        Command::Config { action } => {
            match action {
                ConfigAction::Dump => print!("{}", cfg.to_toml_string()),
                ConfigAction::Check => println!("ok {}", cfg.hash()),
            }
            Ok(())
        }
    }
}

/// `--out`, else `$SDGCOUNT_CACHE/<sub>`.
fn output_dir(out: Option<&Path>, sub: &str) -> Result<PathBuf> {
    if let Some(p) = out {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os(CACHE_ENV) {
        Some(root) => Ok(PathBuf::from(root).join(sub)),
        None => Err(Error::Config(vec![format!("no --out given and {CACHE_ENV} is unset")])),
    }
}

fn require_out(out: Option<&Path>) -> Result<&Path> {
    out.ok_or_else(|| Error::Config(vec!["--out is required for this command".into()]))
}

fn cmd_prepare(cfg: &RunConfig, manifest: &Path, out: Option<&Path>) -> Result<()> {
    let dir = output_dir(out, "targets")?;
    let records = load_manifest(manifest)?.records;
    let report = prepare_targets(&records, &dir, cfg.data.sigma, cfg.model.patch_size, cfg.data.renormalize)?;
    println!(
        "{} written, {} up to date -> {}",
        report.written.len(),
        report.skipped.len(),
        dir.display()
    );
    Ok(())
}

/// Records of `split`, or a seeded partition when the manifest has no such
/// split (`train` takes the first part, anything else the remainder).
fn select_split(cfg: &RunConfig, manifest: &Path, split: &str) -> Result<Vec<ManifestRecord>> {
    let m = load_manifest(manifest)?;
    if m.split_tags().contains(split) {
        return Ok(m.split(split));
    }
    let (train, test) = build_splits(&m, None, cfg.data.train_fraction, cfg.train.seed)?;
    info!("manifest has no `{split}` split; using a seeded {}-record partition", if split == "train" { train.len() } else { test.len() });
    Ok(if split == "train" { train } else { test })
}

fn load_split(cfg: &RunConfig, manifest: &Path, split: &str) -> Result<Vec<LabeledImage>> {
    let records = select_split(cfg, manifest, split)?;
    if records.is_empty() {
        return Err(Error::Data(vec![format!("{}: split `{split}` is empty", manifest.display())]));
    }
    load_records(&records, cfg.data.sigma, cfg.data.renormalize)
}

fn cmd_train(cfg: RunConfig, manifest: &Path, split: &str, resume: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let out = require_out(out)?;
    let (mut state, run) = match resume {
        Some(ck) => {
            let (state, info) = TrainState::load(ck)?;
            if info.config_hash != cfg.hash() {
                warn!("resuming with the configuration stored in {}", ck.display());
            }
            info!("resuming from epoch {} (step {})", info.epoch, info.step);
            (state, info.run)
        }
        None => {
            let model = CountingModel::new(&cfg.model, cfg.train.seed)?;
            (TrainState::new(model, cfg.train.weight_decay), cfg)
        }
    };
    let data = load_split(&run, manifest, split)?;
    info!("training on {} images for {} epochs", data.len(), run.train.epochs);
    let mut sink = Sink::directory(out)?;
    std::fs::write(out.join("config.toml"), run.to_toml_string()).map_err(|e| Error::Io {
        path: out.join("config.toml"),
        source: e,
    })?;
    let history = train_until(&mut state, &data, &run, &mut sink, run.train.epochs)?;
    if let Some(last) = history.epochs.last() {
        info!("epoch {} mean loss {:.4}", last.epoch + 1, last.mean_loss);
    }
    if let Some(ck) = sink.last_checkpoint() {
        println!("{}", ck.display());
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let (model, info) = load_model(checkpoint)?;
    let data = load_split(cfg, manifest, split)?;
    let report = evaluate(
        &ScaledModel {
            model: &model,
            density_scale: info.run.train.density_scale,
        },
        &data,
    )?;
    match out {
        Some(dir) => report.write(dir, cfg.eval.csv)?,
        None => print!("{}", report.to_json()),
    }
    info!(
        "{} images: MAE {:.3} MSE {:.3} mIoU {:.3}",
        report.per_image.len(),
        report.mae,
        report.mse,
        report.miou
    );
    Ok(())
}

fn save(img: &Image, dir: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    img.save_png(&dir.join(name))
}

fn cmd_predict(checkpoint: &Path, image: &Path, out: Option<&Path>) -> Result<()> {
    let (model, info) = load_model(checkpoint)?;
    let img = Image::load(image)?;
    let pred = model.forward_infer(&img, info.run.train.density_scale)?;
    println!("{:.4}", pred.count);
    if let Some(dir) = out {
        save(&render::density_heatmap(&pred.density), dir, "density.png")?;
        let binary = pred.pcm.binarize(model.config().pcm_threshold);
        save(&render::pcm_overlay(&img, &binary), dir, "pcm.png")?;
    }
    Ok(())
}

fn cmd_visualize(
    cfg: &RunConfig,
    checkpoint: &Path,
    image: &Path,
    annotation: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let dir = require_out(out)?;
    let (model, info) = load_model(checkpoint)?;
    let img = Image::load(image)?;
    let pred = model.forward_infer(&img, info.run.train.density_scale)?;
    save(&render::density_heatmap(&pred.density), dir, "density.png")?;
    save(&render::pcm_overlay(&img, &pred.pcm), dir, "pcm_pred.png")?;
    let binary = pred.pcm.binarize(model.config().pcm_threshold);
    save(&render::pcm_overlay(&img, &binary), dir, "pcm_binary.png")?;
    if let Some(ann) = annotation {
        let sample = LabeledImage::from_parts(img.clone(), PointAnnotation::load(ann)?, cfg.data.sigma, cfg.data.renormalize)?;
        let p = model.config().patch_size;
        let (h, w) = (img.height.div_ceil(p) * p, img.width.div_ceil(p) * p);
        let gt = generate_pcm_gt(&sample.density.pad_to(h, w), p)?;
        save(&render::pcm_overlay(&img, &gt), dir, "pcm_gt.png")?;
    }
    println!("{:.4}", pred.count);
    Ok(())
}

fn cmd_synth(
    cfg: &RunConfig,
    n_train: usize,
    n_test: usize,
    size: usize,
    transform: DomainTransform,
    strength: f64,
    out: Option<&Path>,
) -> Result<()> {
    let dir = output_dir(out, "synth")?;
    let spec = SceneSpec {
        height: size,
        width: size,
        transform,
        strength,
        ..SceneSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let pair = generate_domain_pair(&spec, n_train, n_test, cfg.data.sigma, &mut rng)?;
    let src = write_dataset(&dir.join("source"), &pair.source, "train", Some("source"))?;
    let tgt = write_dataset(&dir.join("target"), &pair.target, "test", Some("target"))?;
    println!("{}\n{}", src.display(), tgt.display());
    Ok(())
}
