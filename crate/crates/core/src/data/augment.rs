//! Paired training views: geometry shared by both streams, photometric
//! perturbation applied to the augmented stream only.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{generate_pcm_gt, DensityMap, Image, PatchClassMap};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub blur_prob: f64,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub sharpen_prob: f64,
    pub sharpen_factor: f64,
    pub crop_size: usize,
    pub hflip_prob: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            jitter_prob: 0.8,
            brightness: 0.5,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.1,
            blur_prob: 0.5,
            blur_kernel: 3,
            blur_sigma: 1.0,
            sharpen_prob: 0.5,
            sharpen_factor: 5.0,
            crop_size: 320,
            hflip_prob: 0.5,
        }
    }
}

impl AugmentationConfig {
    /// Same geometry, no photometric change.
    pub fn geometric_only(crop_size: usize) -> Self {
        Self {
            jitter_prob: 0.0,
            blur_prob: 0.0,
            sharpen_prob: 0.0,
            crop_size,
            ..Self::default()
        }
    }

    /// Problems with this config, one message per offending field.
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, p) in [
            ("augment.jitter_prob", self.jitter_prob),
            ("augment.blur_prob", self.blur_prob),
            ("augment.sharpen_prob", self.sharpen_prob),
            ("augment.hflip_prob", self.hflip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("{name} = {p} is not a probability"));
            }
        }
        for (name, v) in [
            ("augment.brightness", self.brightness),
            ("augment.contrast", self.contrast),
            ("augment.saturation", self.saturation),
            ("augment.blur_sigma", self.blur_sigma),
            ("augment.sharpen_factor", self.sharpen_factor),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            out.push(format!("augment.hue = {} must lie in [0, 0.5]", self.hue));
        }
        if self.blur_kernel.is_multiple_of(2) {
            out.push(format!("augment.blur_kernel = {} must be odd", self.blur_kernel));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(32) {
            out.push(format!("augment.crop_size = {} must be a positive multiple of 32", self.crop_size));
        }
        out
    }
}

/// One stream of a training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub density: DensityMap,
    pub pcm: PatchClassMap,
}

/// Crop (and maybe flip) image and labels identically, then derive the
/// augmented view by photometric perturbation of the cropped original. Both
/// returned samples carry the same labels.
pub fn augment_pair<R: Rng + ?Sized>(
    image: &Image,
    density: &DensityMap,
    patch_size: usize,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Sample, Sample)> {
    if (image.height, image.width) != (density.height, density.width) {
        return Err(Error::Shape(format!(
            "image {}x{} and density {}x{} differ",
            image.width, image.height, density.width, density.height
        )));
    }
    let crop = cfg.crop_size;
    if image.height < crop || image.width < crop {
        return Err(Error::Shape(format!(
            "image {}x{} is smaller than crop size {crop}",
            image.width, image.height
        )));
    }
    let top = rng.random_range(0..=image.height - crop);
    let left = rng.random_range(0..=image.width - crop);
    let flip = rng.random_bool(cfg.hflip_prob);

    let mut img = image.crop(top, left, crop, crop);
    let mut den = density.crop(top, left, crop, crop);
    if flip {
        img = img.flip_horizontal();
        den = den.flip_horizontal();
    }
    let pcm = generate_pcm_gt(&den, patch_size)?;
    let aug = photometric(&img, cfg, rng);
    Ok((
        Sample {
            image: img,
            density: den.clone(),
            pcm: pcm.clone(),
        },
        Sample {
            image: aug,
            density: den,
            pcm,
        },
    ))
}

/// Colour jitter, then Gaussian blur, then sharpening, each applied with its
/// configured probability.
pub fn photometric<R: Rng + ?Sized>(img: &Image, cfg: &AugmentationConfig, rng: &mut R) -> Image {
    let mut out = img.clone();
    if rng.random_bool(cfg.jitter_prob) {
        out = color_jitter(&out, cfg, rng);
    }
    if rng.random_bool(cfg.blur_prob) {
        out = gaussian_blur(&out, cfg.blur_kernel, cfg.blur_sigma);
    }
    if rng.random_bool(cfg.sharpen_prob) {
        out = adjust_sharpness(&out, cfg.sharpen_factor);
    }
    out
}

fn factor_range<R: Rng + ?Sized>(rng: &mut R, strength: f64) -> Option<f64> {
    (strength > 0.0).then(|| rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength))
}

/// Brightness, contrast, saturation and hue adjustments in random order.
fn color_jitter<R: Rng + ?Sized>(img: &Image, cfg: &AugmentationConfig, rng: &mut R) -> Image {
    let b = factor_range(rng, cfg.brightness);
    let c = factor_range(rng, cfg.contrast);
    let s = factor_range(rng, cfg.saturation);
    let h = (cfg.hue > 0.0).then(|| rng.random_range(-cfg.hue..=cfg.hue));
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let mut out = img.clone();
    for op in order {
        out = match op {
            0 => b.map_or(out.clone(), |f| adjust_brightness(&out, f)),
            1 => c.map_or(out.clone(), |f| adjust_contrast(&out, f)),
            2 => s.map_or(out.clone(), |f| adjust_saturation(&out, f)),
            _ => h.map_or(out.clone(), |f| adjust_hue(&out, f)),
        };
    }
    out
}

fn grayscale(img: &Image) -> Vec<f64> {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..r.len()).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect()
}

fn blend(a: &Image, b: impl Fn(usize, usize) -> f64, ratio: f64) -> Image {
    let n = a.height * a.width;
    let mut out = a.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        *v = (ratio * *v + (1.0 - ratio) * b(i / n, i % n)).clamp(0.0, 1.0);
    }
    out
}

pub(crate) fn adjust_brightness(img: &Image, factor: f64) -> Image {
    blend(img, |_, _| 0.0, factor)
}

pub(crate) fn adjust_contrast(img: &Image, factor: f64) -> Image {
    let gray = grayscale(img);
    let mean = gray.iter().sum::<f64>() / gray.len() as f64;
    blend(img, |_, _| mean, factor)
}

pub(crate) fn adjust_saturation(img: &Image, factor: f64) -> Image {
    let gray = grayscale(img);
    blend(img, |_, i| gray[i], factor)
}

/// Rotate hue by `shift` (fraction of a full turn).
pub(crate) fn adjust_hue(img: &Image, shift: f64) -> Image {
    let mut out = img.clone();
    let n = img.height * img.width;
    for i in 0..n {
        let (r, g, b) = (img.data[i], img.data[n + i], img.data[2 * n + i]);
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        out.data[i] = r;
        out.data[n + i] = g;
        out.data[2 * n + i] = b;
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let sector = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i.rem_euclid(period);
    (if m < len { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect padding.
pub(crate) fn gaussian_blur(img: &Image, kernel: usize, sigma: f64) -> Image {
    let half = (kernel / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let (h, w) = (img.height, img.width);
    let mut tmp = img.clone();
    let mut out = img.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * img.get(c, y, reflect(x as isize + t as isize - half, w)))
                    .sum();
                tmp.set(c, y, x, acc);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * tmp.get(c, reflect(y as isize + t as isize - half, h), x))
                    .sum();
                out.set(c, y, x, acc);
            }
        }
    }
    out
}

/// Blend with a 3×3 smoothed copy: `factor · img + (1 − factor) · smooth`.
/// Border pixels keep their original value in the smoothed copy.
pub(crate) fn adjust_sharpness(img: &Image, factor: f64) -> Image {
    const K: [[f64; 3]; 3] = [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]];
    let (h, w) = (img.height, img.width);
    let mut smooth = img.clone();
    if h >= 3 && w >= 3 {
        for c in 0..3 {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let mut acc = 0.0;
                    for (dy, row) in K.iter().enumerate() {
                        for (dx, kv) in row.iter().enumerate() {
                            acc += kv * img.get(c, y + dy - 1, x + dx - 1);
                        }
                    }
                    smooth.set(c, y, x, acc / 13.0);
                }
            }
        }
    }
    blend(img, |c, i| smooth.data[c * h * w + i], factor)
}
