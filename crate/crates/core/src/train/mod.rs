//! Training loop, schedule, checkpoints and seeding.

mod optim;

pub use optim::{AdamW, OneCycle, ADAM_BETAS, ADAM_EPS};

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::io::LabeledImage;
use crate::data::{augment_pair, AugmentationConfig, Sample};
use crate::error::{Error, Result};
use crate::losses::{attach_losses, LossParts, PairTargets};
use crate::model::{images_to_tensor, CountingModel, WeightsFile, DENSITY_STRIDE};
use crate::tensor::Tensor;

const STREAM_SAMPLE: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_STEP: u64 = 3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG stream for a tuple of coordinates under a global seed.
pub fn stream_rng(seed: u64, coords: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &c in coords {
        h = splitmix(h ^ c);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// RNG for augmenting sample `index` in `epoch`; independent of batching
/// and iteration order.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    stream_rng(seed, &[STREAM_SAMPLE, epoch as u64, index as u64])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(flatten)]
    pub parts: LossParts,
    /// Percentage of feature elements removed by the content error mask.
    pub pde: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

/// Destination for step logs and checkpoints. [`Sink::memory`] keeps
/// everything in the returned [`History`] only.
pub struct Sink {
    dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
    last_checkpoint: Option<PathBuf>,
}

impl Sink {
    pub fn memory() -> Self {
        Self {
            dir: None,
            log: None,
            last_checkpoint: None,
        }
    }

    /// Append step records to `dir/train_log.jsonl`; checkpoints go to `dir`.
    pub fn directory(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("train_log.jsonl");
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            log: Some(BufWriter::new(f)),
            last_checkpoint: None,
        })
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    fn record(&mut self, r: &StepRecord) -> Result<()> {
        if let (Some(log), Some(dir)) = (self.log.as_mut(), self.dir.as_ref()) {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(log, "{line}").map_err(|e| Error::io(dir.join("train_log.jsonl"), e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let (Some(log), Some(dir)) = (self.log.as_mut(), self.dir.as_ref()) {
            log.flush().map_err(|e| Error::io(dir.join("train_log.jsonl"), e))?;
        }
        Ok(())
    }
}

/// Model plus optimizer position; everything needed to resume.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: CountingModel,
    pub opt: AdamW,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Number of completed optimizer steps.
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    run: RunConfig,
    config_hash: String,
    seed: u64,
    epoch: usize,
    step: usize,
    opt_steps: u64,
}

/// Metadata recorded in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub run: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
}

impl TrainState {
    pub fn new(model: CountingModel, weight_decay: f64) -> Self {
        let n = model.params().len();
        Self {
            model,
            opt: AdamW::new(n, weight_decay),
            epoch: 0,
            step: 0,
        }
    }

    pub fn save(&self, path: &Path, run: &RunConfig) -> Result<()> {
        let meta = CheckpointMeta {
            run: run.clone(),
            config_hash: run.hash(),
            seed: run.train.seed,
            epoch: self.epoch,
            step: self.step,
            opt_steps: self.opt.t,
        };
        let mut tensors = Vec::new();
        for (i, e) in self.model.params().entries().iter().enumerate() {
            tensors.push((format!("param/{}", e.name), e.value.clone()));
            if let Some((m, v)) = &self.opt.state[i] {
                tensors.push((format!("adam_m/{}", e.name), m.clone()));
                tensors.push((format!("adam_v/{}", e.name), v.clone()));
            }
        }
        WeightsFile {
            meta: serde_json::to_value(meta).expect("meta serializes"),
            tensors,
        }
        .write(path)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointInfo)> {
        let file = WeightsFile::read(path)?;
        let meta: CheckpointMeta = serde_json::from_value(file.meta.clone()).map_err(|e| Error::format(path, e))?;
        let mut model_cfg = meta.run.model.clone();
        model_cfg.pretrained_weights.clear();
        let mut model = CountingModel::new(&model_cfg, 0)?;
        let mut opt = AdamW::new(model.params().len(), meta.run.train.weight_decay);
        opt.t = meta.opt_steps;
        let mut missing = Vec::new();
        for i in 0..model.params().len() {
            let name = model.params().entry(i).name.clone();
            match file.tensor(&format!("param/{name}")) {
                Some(t) if t.shape() == model.params().value(i).shape() => *model.params_mut().value_mut(i) = t.clone(),
                Some(t) => missing.push(format!("{name}: stored shape {:?} does not match", t.shape())),
                None => missing.push(format!("{name}: missing from checkpoint")),
            }
            if let (Some(m), Some(v)) = (file.tensor(&format!("adam_m/{name}")), file.tensor(&format!("adam_v/{name}"))) {
                opt.state[i] = Some((m.clone(), v.clone()));
            }
        }
        if !missing.is_empty() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: missing.join("; "),
            });
        }
        let info = CheckpointInfo {
            run: meta.run,
            config_hash: meta.config_hash,
            seed: meta.seed,
            epoch: meta.epoch,
            step: meta.step,
        };
        Ok((
            Self {
                model,
                opt,
                epoch: info.epoch,
                step: info.step,
            },
            info,
        ))
    }
}

/// Load only the model from a training checkpoint.
pub fn load_model(path: &Path) -> Result<(CountingModel, CheckpointInfo)> {
    TrainState::load(path).map(|(s, i)| (s.model, i))
}

fn stack_targets(samples: &[&Sample], density_scale: f64) -> Result<PairTargets> {
    let mut dens = Vec::new();
    let mut pcm = Vec::new();
    let s0 = samples[0];
    let pooled0 = s0.density.sum_pool(DENSITY_STRIDE)?;
    for s in samples {
        let pooled = s.density.sum_pool(DENSITY_STRIDE)?;
        dens.extend(pooled.values.iter().map(|v| v * density_scale / s.density.scale));
        pcm.extend_from_slice(&s.pcm.values);
    }
    let n = samples.len();
    Ok(PairTargets {
        density: Tensor::from_vec(&[n, 1, pooled0.height, pooled0.width], dens),
        pcm: Tensor::from_vec(&[n, 1, s0.pcm.rows, s0.pcm.cols], pcm),
    })
}

struct StepOutcome {
    loss: f64,
    parts: LossParts,
    pde: f64,
}

fn train_step(
    model: &mut CountingModel,
    opt: &mut AdamW,
    pairs: &[(Sample, Sample)],
    lr: f64,
    run: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let ori: Vec<&Sample> = pairs.iter().map(|p| &p.0).collect();
    let aug: Vec<&Sample> = pairs.iter().map(|p| &p.1).collect();
    let x_ori = images_to_tensor(&ori.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let x_aug = images_to_tensor(&aug.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let targets = stack_targets(&ori, run.train.density_scale)?;
    let mut fwd = model.forward_train(&x_ori, &x_aug, rng)?;
    let use_acl = model.config().switches.acl;
    let (root, breakdown) = attach_losses(&mut fwd, &targets, &run.loss, use_acl)?;
    let mut grads = fwd.graph.backward(root);

    let mut collected: Vec<(usize, Tensor)> = Vec::new();
    for &(idx, var) in &fwd.bindings {
        if !model.params().entry(idx).trainable {
            continue;
        }
        if let Some(g) = grads.take(var) {
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    term: format!("gradient of {}", model.params().entry(idx).name),
                    checkpoint: None,
                });
            }
            collected.push((idx, g));
        }
    }
    if run.train.grad_clip > 0.0 {
        let norm = collected.iter().map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if norm > run.train.grad_clip {
            let s = run.train.grad_clip / norm;
            collected.iter_mut().for_each(|(_, g)| g.scale(s));
        }
    }
    model.update_bn_stats(&fwd.bn_stats);

    let mut grad_of: Vec<Option<Tensor>> = vec![None; model.params().len()];
    for (i, g) in collected {
        grad_of[i] = Some(g);
    }
    let trainable: Vec<usize> = model.params().trainable().collect();
    let store = model.params_mut();
    let mut slots: Vec<(usize, Tensor)> = trainable.iter().map(|&i| (i, store.value(i).clone())).collect();
    {
        let mut refs: Vec<(&mut Tensor, Option<&Tensor>, usize)> =
            slots.iter_mut().map(|(i, w)| (w, grad_of[*i].as_ref(), *i)).collect();
        opt.step(lr, &mut refs);
    }
    for (i, w) in slots {
        *store.value_mut(i) = w;
    }
    Ok(StepOutcome {
        loss: breakdown.total,
        parts: breakdown.parts,
        pde: 100.0 * fwd.pde,
    })
}

/// Steps per epoch for a dataset of `n` images.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Train a fresh state for `run.train.epochs` epochs; the trained weights are
/// written back into `model`.
pub fn train(model: &mut CountingModel, dataset: &[LabeledImage], run: &RunConfig, sink: &mut Sink) -> Result<History> {
    let mut state = TrainState::new(model.clone(), run.train.weight_decay);
    let history = train_until(&mut state, dataset, run, sink, run.train.epochs)?;
    *model = state.model;
    Ok(history)
}

/// Continue training `state` until `end_epoch` epochs are complete. The
/// schedule always spans `run.train.epochs`, so stopping early and resuming
/// reproduces an uninterrupted run exactly.
pub fn train_until(
    state: &mut TrainState,
    dataset: &[LabeledImage],
    run: &RunConfig,
    sink: &mut Sink,
    end_epoch: usize,
) -> Result<History> {
    run.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data(vec!["training set is empty".into()]));
    }
    let cfg = &run.train;
    let spe = steps_per_epoch(dataset.len(), cfg.batch_size);
    let sched = OneCycle::new(cfg, spe * cfg.epochs);
    let patch = state.model.config().patch_size;
    let started = Instant::now();
    let mut history = History::default();
    let end_epoch = end_epoch.min(cfg.epochs);

    while state.epoch < end_epoch {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let pairs = batch
                .iter()
                .map(|&i| {
                    let s = &dataset[i];
                    augment_pair(&s.image, &s.density, patch, &run.augment, &mut sample_rng(cfg.seed, epoch, i))
                })
                .collect::<Result<Vec<_>>>()?;
            let lr = sched.lr(state.step);
            let mut rng = stream_rng(cfg.seed, &[STREAM_STEP, state.step as u64]);
            let out = train_step(&mut state.model, &mut state.opt, &pairs, lr, run, &mut rng).map_err(|e| match e {
                Error::NonFinite { term, .. } => Error::NonFinite {
                    term,
                    checkpoint: sink.last_checkpoint.clone(),
                },
                other => other,
            })?;
            let rec = StepRecord {
                step: state.step,
                epoch,
                lr,
                loss: out.loss,
                parts: out.parts,
                pde: out.pde,
                wall_time: started.elapsed().as_secs_f64(),
            };
            log::debug!("step {} loss {:.6} lr {:.3e}", rec.step, rec.loss, rec.lr);
            sink.record(&rec)?;
            losses.push(out.loss);
            history.steps.push(rec);
            state.step += 1;
        }
        state.epoch += 1;
        let summary = EpochSummary {
            epoch,
            steps: losses.len(),
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
        };
        log::info!("epoch {} mean loss {:.6}", epoch, summary.mean_loss);
        history.epochs.push(summary);
        sink.flush()?;
        let due = cfg.checkpoint_every > 0 && state.epoch.is_multiple_of(cfg.checkpoint_every);
        if let Some(dir) = sink.dir.clone() {
            if due || state.epoch == end_epoch {
                let path = dir.join(format!("epoch_{:04}.ckpt", state.epoch));
                state.save(&path, run)?;
                state.save(&dir.join("last.ckpt"), run)?;
                sink.last_checkpoint = Some(path);
            }
        }
    }
    Ok(history)
}

/// Absolute count error, averaged over images, using single-stream inference.
pub fn train_mae(model: &CountingModel, samples: &[LabeledImage], density_scale: f64) -> Result<f64> {
    let mut err = 0.0;
    for s in samples {
        err += (model.forward_infer(&s.image, density_scale)?.count - s.count()).abs();
    }
    Ok(err / samples.len() as f64)
}

/// Fit a handful of fixed samples (whole images, no augmentation) for
/// `steps` optimizer steps and return the train-set MAE. Images must share
/// a size divisible by 32.
pub fn overfit_probe(model: &mut CountingModel, samples: &[LabeledImage], steps: usize, run: &RunConfig) -> Result<f64> {
    if samples.is_empty() || samples.len() > 8 {
        return Err(Error::InvalidArgument(format!("probe takes 1..=8 samples, got {}", samples.len())));
    }
    let (h, w) = (samples[0].image.height, samples[0].image.width);
    if samples.iter().any(|s| (s.image.height, s.image.width) != (h, w)) || h != w || h % 32 != 0 {
        return Err(Error::InvalidArgument("probe samples must be equal squares with side divisible by 32".into()));
    }
    let patch = model.config().patch_size;
    let mut aug = AugmentationConfig::geometric_only(h);
    aug.hflip_prob = 0.0;
    let pairs = samples
        .iter()
        .map(|s| augment_pair(&s.image, &s.density, patch, &aug, &mut sample_rng(run.train.seed, 0, 0)))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(model.params().len(), run.train.weight_decay);
    let sched = OneCycle::new(&run.train, steps);
    for step in 0..steps {
        let mut rng = stream_rng(run.train.seed, &[STREAM_STEP, step as u64]);
        train_step(model, &mut opt, &pairs, sched.lr(step), run, &mut rng)?;
    }
    train_mae(model, samples, run.train.density_scale)
}
