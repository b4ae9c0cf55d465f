//! The dual-stream counting network.
//!
//! Encoder: five conv/BN/ReLU levels, each closed by 2×2 max-pooling
//! (strides 2..32). Decoder: the stride-32 output is upsampled and fused with
//! the stride-16 and then stride-8 encoder outputs, yielding the `C`-channel
//! stride-8 feature that feeds masking, memory reconstruction and the density
//! head. The stride-32 encoder output feeds the patch classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::WeightsFile;
use super::features::{cem_batch, draw_channel_dropout, FeatureMap};
use super::heads::{binarize_resize_pcm, upsample_density};
use super::memory::MemoryBank;
use super::params::ParamStore;
use super::{ModelConfig, Switches};
use crate::autograd::{BatchStats, Graph, Var};
use crate::data::{DensityMap, Image, PatchClassMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride of the reconstruction feature and of predicted density maps.
pub const DENSITY_STRIDE: usize = 8;
/// Stride of the deepest encoder feature.
pub const DEEPEST_STRIDE: usize = 32;

const BN_MOMENTUM: f64 = 0.1;
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
pub struct CountingModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: Vec<Vec<ConvBn>>,
    dec_mid: ConvBn,
    dec_out: ConvBn,
    memory: usize,
    density_head: Conv,
    pc_hidden: ConvBn,
    pc_out: Conv,
}

fn add_conv<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, k: usize, std: f64) -> Conv {
    let w = store.add(format!("{name}.weight"), Tensor::randn(&[cout, cin, k, k], std, rng), true);
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true);
    Conv { w, b, pad: k / 2 }
}

fn add_conv_bn<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, k: usize) -> ConvBn {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    let conv = add_conv(store, rng, name, cin, cout, k, std);
    ConvBn {
        conv,
        gamma: store.add(format!("{name}.bn.weight"), Tensor::full(&[cout], 1.0), true),
        beta: store.add(format!("{name}.bn.bias"), Tensor::zeros(&[cout]), true),
        mean: store.add(format!("{name}.bn.running_mean"), Tensor::zeros(&[cout]), false),
        var: store.add(format!("{name}.bn.running_var"), Tensor::full(&[cout], 1.0), false),
    }
}

/// Per-pass state: lazily bound parameter leaves and collected BN statistics.
struct Pass<'a> {
    g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    training: bool,
    stats: Vec<(usize, usize, BatchStats)>,
}

impl<'a> Pass<'a> {
    fn new(store: &'a ParamStore, training: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            training,
            stats: Vec::new(),
        }
    }

    fn p(&mut self, idx: usize) -> Var {
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let v = self.g.param(self.store.value(idx).clone());
        self.bound[idx] = Some(v);
        v
    }

    fn conv(&mut self, c: &Conv, x: Var) -> Var {
        let (w, b) = (self.p(c.w), self.p(c.b));
        self.g.conv2d(x, w, b, c.pad)
    }

    fn conv_bn_relu(&mut self, l: &ConvBn, x: Var) -> Var {
        let y = self.conv(&l.conv, x);
        let (gamma, beta) = (self.p(l.gamma), self.p(l.beta));
        let running = (!self.training).then(|| (self.store.value(l.mean).data(), self.store.value(l.var).data()));
        let (z, stats) = self.g.batch_norm(y, gamma, beta, running);
        if let Some(s) = stats {
            self.stats.push((l.mean, l.var, s));
        }
        self.g.relu(z)
    }

    fn bindings(&self) -> Vec<(usize, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .collect()
    }
}

/// Graph and handles produced by one dual-stream training pass over a
/// stacked `[ori; aug]` batch of `2n` images.
pub struct TrainForward {
    pub graph: Graph,
    /// Number of pairs.
    pub n: usize,
    /// Final density `D′ = D̂ ⊙ C′`, `[2n, 1, H/8, W/8]`.
    pub density: Var,
    /// Unmasked density `D̂`.
    pub raw_density: Var,
    /// Patch probabilities `Ĉ`, `[2n, 1, H/P, W/P]`, when PC is on.
    pub pcm: Option<Var>,
    /// Attention scores `[2n·h·w, M]`, when AMB is on.
    pub attn: Option<Var>,
    /// Reconstruction-level features before masking.
    pub features: Var,
    /// Portion of feature elements zeroed by the content error mask.
    pub pde: f64,
    /// `(parameter index, graph leaf)` for every parameter used.
    pub bindings: Vec<(usize, Var)>,
    /// `(running-mean index, running-var index, batch stats)` per BN layer.
    pub bn_stats: Vec<(usize, usize, BatchStats)>,
}

/// Tensor-valued results of [`CountingModel::forward_train`], split by stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutputs {
    pub density_ori: Tensor,
    pub density_aug: Tensor,
    pub pcm_ori: Option<Tensor>,
    pub pcm_aug: Option<Tensor>,
    pub attn_ori: Option<Tensor>,
    pub attn_aug: Option<Tensor>,
    pub pde: f64,
}

impl TrainForward {
    pub fn outputs(&self) -> TrainOutputs {
        let n = self.n;
        let halves = |v: Var| {
            let t = self.graph.value(v);
            (t.batch_slice(0, n), t.batch_slice(n, 2 * n))
        };
        let (density_ori, density_aug) = halves(self.density);
        let (pcm_ori, pcm_aug) = self.pcm.map(halves).unzip();
        let (attn_ori, attn_aug) = self
            .attn
            .map(|a| {
                let t = self.graph.value(a);
                let rows = t.shape()[0] / 2;
                (t.batch_slice(0, rows), t.batch_slice(rows, 2 * rows))
            })
            .unzip();
        TrainOutputs {
            density_ori,
            density_aug,
            pcm_ori,
            pcm_aug,
            attn_ori,
            attn_aug,
            pde: self.pde,
        }
    }
}

/// Single-stream prediction on one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// Full-resolution density in persons per pixel, cropped to the input size.
    pub density: DensityMap,
    /// `density.sum()`.
    pub count: f64,
    /// Patch probabilities covering the input (cropped to `ceil(H/P) × ceil(W/P)`).
    pub pcm: PatchClassMap,
    /// Size the input was reflect-padded to.
    pub padded: (usize, usize),
}

/// Stack images into a normalized `[n, 3, H, W]` tensor.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} and {}x{} images",
                w, h, img.width, img.height
            )));
        }
        for c in 0..3 {
            data.extend(img.plane(c).iter().map(|v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]));
        }
    }
    Ok(Tensor::from_vec(&[images.len(), 3, h, w], data))
}

/// Smallest size ≥ `len` divisible by `multiple`.
pub fn round_up(len: usize, multiple: usize) -> usize {
    len.div_ceil(multiple) * multiple
}

impl CountingModel {
    /// Randomly initialised model (seeded). Loads `pretrained_weights` when set.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let issues = config.issues();
        if !issues.is_empty() {
            return Err(Error::Config(issues));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topo = config.backbone.topology();
        let mut store = ParamStore::default();
        let mut encoder = Vec::new();
        let mut cin = 3;
        for (li, &(width, convs)) in topo.levels.iter().enumerate() {
            let mut level = Vec::new();
            for ci in 0..convs {
                level.push(add_conv_bn(&mut store, &mut rng, &format!("encoder.{li}.{ci}"), cin, width, 3));
                cin = width;
            }
            encoder.push(level);
        }
        let w8 = topo.levels[2].0;
        let w16 = topo.levels[3].0;
        let w32 = topo.levels[4].0;
        let dec_mid = add_conv_bn(&mut store, &mut rng, "decoder.mid", w32 + w16, topo.decoder_mid, 3);
        let dec_out = add_conv_bn(&mut store, &mut rng, "decoder.out", topo.decoder_mid + w8, config.memory_dim, 3);
        let memory = store.add(
            "memory",
            Tensor::randn(&[config.memory_count, config.memory_dim], 1.0, &mut rng),
            true,
        );
        let head_std = 0.1 / (config.memory_dim as f64).sqrt();
        let density_head = add_conv(&mut store, &mut rng, "density_head", config.memory_dim, 1, 1, head_std);
        let pc_hidden = add_conv_bn(&mut store, &mut rng, "pc_head.hidden", w32, topo.pc_hidden, 3);
        let pc_out = add_conv(&mut store, &mut rng, "pc_head.out", topo.pc_hidden, 1, 1, 0.01);
        let mut model = Self {
            config: config.clone(),
            store,
            encoder,
            dec_mid,
            dec_out,
            memory,
            density_head,
            pc_hidden,
            pc_out,
        };
        if !config.pretrained_weights.is_empty() {
            let file = WeightsFile::read(std::path::Path::new(&config.pretrained_weights))?;
            model.load_matching(&file.tensors)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Switches are runtime-adjustable (e.g. for ablation evaluation).
    pub fn set_switches(&mut self, s: Switches) {
        self.config.switches = s;
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn memory_bank(&self) -> MemoryBank {
        let t = self.store.value(self.memory);
        MemoryBank::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }

    /// Index of the memory bank tensor in [`Self::params`].
    pub fn memory_param(&self) -> usize {
        self.memory
    }

    /// Indices of the density-head and patch-classifier tensors.
    pub fn head_params(&self) -> Vec<usize> {
        let mut v = vec![self.density_head.w, self.density_head.b];
        let h = &self.pc_hidden;
        v.extend([h.conv.w, h.conv.b, h.gamma, h.beta, self.pc_out.w, self.pc_out.b]);
        v
    }

    /// Copy in tensors whose names match; shapes must agree.
    pub fn load_matching(&mut self, tensors: &[(String, Tensor)]) -> Result<usize> {
        let mut problems = Vec::new();
        let mut loaded = 0;
        for (name, t) in tensors {
            if let Some(i) = self.store.index_of(name) {
                if self.store.value(i).shape() == t.shape() {
                    *self.store.value_mut(i) = t.clone();
                    loaded += 1;
                } else {
                    problems.push(format!(
                        "{name}: shape {:?} does not match model shape {:?}",
                        t.shape(),
                        self.store.value(i).shape()
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(loaded)
        } else {
            Err(Error::Data(problems))
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h == 0 || w == 0 || h % DEEPEST_STRIDE != 0 || w % DEEPEST_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "input {w}x{h} must be a non-empty multiple of {DEEPEST_STRIDE}; reflect-pad it first"
            )));
        }
        Ok(())
    }

    /// Returns `(stride-8 reconstruction feature, stride-32 deepest feature)`.
    fn encode_vars(&self, pass: &mut Pass, x: Var) -> (Var, Var) {
        let mut h = x;
        let mut taps = Vec::new();
        for level in &self.encoder {
            for l in level {
                h = pass.conv_bn_relu(l, h);
            }
            h = pass.g.max_pool2(h);
            taps.push(h);
        }
        let (s8, s16, s32) = (taps[2], taps[3], taps[4]);
        let up = pass.g.upsample_nearest(s32, 2);
        let cat = pass.g.concat_channels(up, s16);
        let mid = pass.conv_bn_relu(&self.dec_mid, cat);
        let up = pass.g.upsample_nearest(mid, 2);
        let cat = pass.g.concat_channels(up, s8);
        let feat = pass.conv_bn_relu(&self.dec_out, cat);
        (feat, s32)
    }

    fn pc_vars(&self, pass: &mut Pass, deepest: Var) -> Var {
        let h = pass.conv_bn_relu(&self.pc_hidden, deepest);
        let logits = pass.conv(&self.pc_out, h);
        let prob = pass.g.sigmoid(logits);
        pass.g.upsample_nearest(prob, DEEPEST_STRIDE / self.config.patch_size)
    }

    fn density_vars(&self, pass: &mut Pass, feat: Var) -> Var {
        let d = pass.conv(&self.density_head, feat);
        pass.g.relu(d)
    }

    // Binarized, nearest-expanded patch mask at density resolution.
    fn pcm_density_mask(&self, pcm: &Tensor, dh: usize, dw: usize) -> Result<Tensor> {
        let (n, _, gh, gw) = pcm.dims4();
        let mut out = Vec::with_capacity(n * dh * dw);
        for ni in 0..n {
            let grid = PatchClassMap::new(
                gh,
                gw,
                self.config.patch_size,
                pcm.data()[ni * gh * gw..(ni + 1) * gh * gw].to_vec(),
            );
            out.extend(binarize_resize_pcm(&grid, self.config.pcm_threshold, (dh, dw))?);
        }
        Ok(Tensor::from_vec(&[n, 1, dh, dw], out))
    }

    /// Encoder-decoder features of one image (inference-mode batch norm).
    pub fn encode(&self, image: &Image) -> Result<(FeatureMap, FeatureMap)> {
        let x = images_to_tensor(&[image])?;
        self.check_input(&x)?;
        let mut pass = Pass::new(&self.store, false);
        let xv = pass.g.input(x);
        let (f, z) = self.encode_vars(&mut pass, xv);
        Ok((
            FeatureMap::from_tensor(pass.g.value(f), 0, DENSITY_STRIDE),
            FeatureMap::from_tensor(pass.g.value(z), 0, DEEPEST_STRIDE),
        ))
    }

    /// Stride-8 density from a reconstruction-level feature (scale 1).
    pub fn density_head(&self, recon: &FeatureMap) -> Result<DensityMap> {
        if recon.channels != self.config.memory_dim {
            return Err(Error::Shape(format!(
                "density head expects {} channels, got {}",
                self.config.memory_dim, recon.channels
            )));
        }
        let mut pass = Pass::new(&self.store, false);
        let f = pass.g.input(recon.to_tensor());
        let d = self.density_vars(&mut pass, f);
        Ok(DensityMap {
            height: recon.height,
            width: recon.width,
            values: pass.g.value(d).data().to_vec(),
            scale: 1.0,
        })
    }

    /// Patch probabilities from the deepest feature, on the `P`-pixel grid.
    pub fn pc_head(&self, deepest: &FeatureMap) -> Result<PatchClassMap> {
        let expect = self.config.backbone.topology().levels[4].0;
        if deepest.channels != expect {
            return Err(Error::Shape(format!(
                "patch head expects {expect} channels, got {}",
                deepest.channels
            )));
        }
        let mut pass = Pass::new(&self.store, false);
        let z = pass.g.input(deepest.to_tensor());
        let p = self.pc_vars(&mut pass, z);
        let (_, _, gh, gw) = pass.g.value(p).dims4();
        Ok(PatchClassMap::new(gh, gw, self.config.patch_size, pass.g.value(p).data().to_vec()))
    }

    /// Dual-stream training pass on stacked `[ori; aug]` batches (each
    /// `[n, 3, H, W]`, already normalized via [`images_to_tensor`]).
    ///
    /// One content error mask per pair, computed from both streams' features,
    /// multiplies both streams; one channel-dropout draw per pair is shared
    /// likewise. Dropout is applied whenever the memory bank is on.
    pub fn forward_train<R: Rng + ?Sized>(&self, ori: &Tensor, aug: &Tensor, rng: &mut R) -> Result<TrainForward> {
        if ori.shape() != aug.shape() {
            return Err(Error::Shape(format!(
                "stream shapes differ: {:?} vs {:?}",
                ori.shape(),
                aug.shape()
            )));
        }
        self.check_input(ori)?;
        let n = ori.shape()[0];
        let sw = self.config.switches;
        let mut pass = Pass::new(&self.store, true);
        let x = pass.g.input(Tensor::concat_batch(&[ori, aug]));
        let (feat, deepest) = self.encode_vars(&mut pass, x);

        let (_, c, fh, fw) = pass.g.value(feat).dims4();
        let hw = fh * fw;
        let mut pde = 0.0;
        let mut multiplier: Option<Tensor> = None;
        if sw.cem {
            let mask = cem_batch(pass.g.value(feat), self.config.alpha);
            pde = 1.0 - mask.sum() / mask.len() as f64;
            multiplier = Some(Tensor::concat_batch(&[&mask, &mask]));
        }
        if sw.amb && self.config.dropout_rate > 0.0 {
            let m = multiplier.get_or_insert_with(|| Tensor::full(&[2 * n, c, fh, fw], 1.0));
            for ni in 0..n {
                let scales = draw_channel_dropout(c, self.config.dropout_rate, rng);
                for (ci, s) in scales.iter().enumerate() {
                    for stream in [ni, ni + n] {
                        let off = (stream * c + ci) * hw;
                        m.data_mut()[off..off + hw].iter_mut().for_each(|v| *v *= s);
                    }
                }
            }
        }
        let masked = match multiplier {
            Some(m) => pass.g.mul_const(feat, m),
            None => feat,
        };

        let (recon, attn) = if sw.amb {
            let v = pass.p(self.memory);
            let a = pass.g.attn_scores(masked, v);
            (pass.g.attn_read(a, v, (c, fh, fw)), Some(a))
        } else {
            (masked, None)
        };
        let raw_density = self.density_vars(&mut pass, recon);

        let (density, pcm) = if sw.pc {
            let p = self.pc_vars(&mut pass, deepest);
            let mask = self.pcm_density_mask(pass.g.value(p), fh, fw)?;
            (pass.g.mul_const(raw_density, mask), Some(p))
        } else {
            (raw_density, None)
        };

        let bindings = pass.bindings();
        Ok(TrainForward {
            graph: pass.g,
            n,
            density,
            raw_density,
            pcm,
            attn,
            features: feat,
            pde,
            bindings,
            bn_stats: pass.stats,
        })
    }

    /// Fold batch statistics from a training pass into running averages.
    pub fn update_bn_stats(&mut self, stats: &[(usize, usize, BatchStats)]) {
        for (mi, vi, s) in stats {
            for (r, b) in self.store.value_mut(*mi).data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in self.store.value_mut(*vi).data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    /// Single-stream prediction. The image is reflect-padded to a multiple of
    /// 32, the density is predicted at stride 8, masked by the binarized
    /// patch map, upsampled with mass preservation and cropped back.
    /// `density_scale` is the factor applied to training targets.
    pub fn forward_infer(&self, image: &Image, density_scale: f64) -> Result<Inference> {
        if image.height == 0 || image.width == 0 {
            return Err(Error::Shape("empty image".into()));
        }
        let ph = round_up(image.height, DEEPEST_STRIDE);
        let pw = round_up(image.width, DEEPEST_STRIDE);
        let padded = image.reflect_pad(ph, pw);
        let x = images_to_tensor(&[&padded])?;
        let sw = self.config.switches;
        let mut pass = Pass::new(&self.store, false);
        let xv = pass.g.input(x);
        let (feat, deepest) = self.encode_vars(&mut pass, xv);
        let (_, c, fh, fw) = pass.g.value(feat).dims4();
        let recon = if sw.amb {
            let v = pass.p(self.memory);
            let a = pass.g.attn_scores(feat, v);
            pass.g.attn_read(a, v, (c, fh, fw))
        } else {
            feat
        };
        let d = self.density_vars(&mut pass, recon);
        let p = self.pc_vars(&mut pass, deepest);
        let mut dens = pass.g.value(d).clone();
        if sw.pc {
            let mask = self.pcm_density_mask(pass.g.value(p), fh, fw)?;
            dens.data_mut().iter_mut().zip(mask.data()).for_each(|(a, b)| *a *= b);
        }
        let coarse = DensityMap {
            height: fh,
            width: fw,
            values: dens.into_data(),
            scale: density_scale,
        };
        let full = upsample_density(&coarse, DENSITY_STRIDE).crop(0, 0, image.height, image.width);
        let density = DensityMap {
            height: full.height,
            width: full.width,
            values: full.values.iter().map(|v| v / density_scale).collect(),
            scale: 1.0,
        };
        let count = density.sum();
        let pt = pass.g.value(p);
        let (_, _, gh, gw) = pt.dims4();
        let grid = PatchClassMap::new(gh, gw, self.config.patch_size, pt.data().to_vec());
        let ps = self.config.patch_size;
        let pcm = grid.crop_cells(image.height.div_ceil(ps), image.width.div_ceil(ps));
        Ok(Inference {
            density,
            count,
            pcm,
            padded: (ph, pw),
        })
    }
}
