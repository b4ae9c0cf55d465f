//! Synthetic crowd-like scenes with exact head positions and controllable
//! photometric domain shift.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::io::LabeledImage;
use crate::data::{write_manifest, Image, ManifestRecord, PointAnnotation};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTransform {
    Identity,
    /// Global per-channel colour offset.
    ColorShift,
    /// Blend towards a bright, low-contrast veil.
    Haze,
    BrightnessContrast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive head-count range.
    pub count_range: (usize, usize),
    /// Inclusive head-radius range in pixels.
    pub radius_range: (f64, f64),
    /// Selects the background pattern family.
    pub texture: u32,
    pub transform: DomainTransform,
    /// Transform strength in `[0, 1]`.
    pub strength: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            count_range: (5, 20),
            radius_range: (2.0, 3.5),
            texture: 0,
            transform: DomainTransform::Identity,
            strength: 0.0,
        }
    }
}

impl SceneSpec {
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.height == 0 || self.width == 0 {
            out.push("canvas must be non-empty".into());
        }
        if self.count_range.0 > self.count_range.1 {
            out.push(format!("count range {:?} is reversed", self.count_range));
        }
        let (r0, r1) = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            out.push(format!("radius range {:?} must be positive and ordered", self.radius_range));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            out.push(format!("strength {} must lie in [0, 1]", self.strength));
        }
        out
    }
}

fn background<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Image {
    let mut tex = ChaCha8Rng::seed_from_u64(0x7E_u64 ^ u64::from(spec.texture).wrapping_mul(0x9E37_79B9));
    let base = [
        0.35 + 0.3 * tex.random::<f64>(),
        0.45 + 0.3 * tex.random::<f64>(),
        0.3 + 0.3 * tex.random::<f64>(),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                tex.random_range(0.02..0.25),
                tex.random_range(0.02..0.25),
                rng.random_range(0.0..std::f64::consts::TAU),
                tex.random_range(0.02..0.08),
            )
        })
        .collect();
    let mut img = Image::new(spec.height, spec.width);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let mut t: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            t += 0.03 * (rng.random::<f64>() - 0.5);
            for (c, b) in base.iter().enumerate() {
                img.set(c, y, x, (b + t).clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn draw_head(img: &mut Image, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
    let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
    let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + r + 1.0).ceil() as usize).min(img.height);
    let x1 = ((cx + r + 1.0).ceil() as usize).min(img.width);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let cover = (r + 0.5 - d).clamp(0.0, 1.0);
            if cover > 0.0 {
                // darker crown towards the top of the disc
                let shade = if (y as f64) < cy { 0.7 } else { 1.0 };
                for (c, col) in color.iter().enumerate() {
                    let v = img.get(c, y, x);
                    img.set(c, y, x, v * (1.0 - cover) + cover * col * shade);
                }
            }
        }
    }
}

/// Apply a photometric domain shift of the given strength.
pub fn apply_transform(img: &Image, transform: DomainTransform, strength: f64) -> Image {
    let s = strength;
    let mut out = img.clone();
    if s == 0.0 {
        return out;
    }
    for c in 0..3 {
        let plane = out.plane_mut(c);
        match transform {
            DomainTransform::Identity => {}
            DomainTransform::ColorShift => {
                let off = [0.25, -0.1, -0.2][c] * s;
                plane.iter_mut().for_each(|v| *v = (*v + off).clamp(0.0, 1.0));
            }
            DomainTransform::Haze => {
                let veil = [0.85, 0.86, 0.9][c];
                let a = 0.7 * s;
                plane.iter_mut().for_each(|v| *v = *v * (1.0 - a) + a * veil);
            }
            DomainTransform::BrightnessContrast => {
                let k = 1.0 - 0.6 * s;
                plane.iter_mut().for_each(|v| *v = ((*v - 0.5) * k + 0.5 + 0.25 * s).clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn render(spec: &SceneSpec, count: usize, id: &str, rng: &mut ChaCha8Rng) -> (Image, PointAnnotation) {
    let mut img = background(spec, rng);
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let x = rng.random_range(0.0..spec.width as f64);
        let y = rng.random_range(0.0..spec.height as f64);
        let r = rng.random_range(spec.radius_range.0..=spec.radius_range.1);
        let tone = rng.random_range(0.08..0.3);
        let color = [tone + 0.12, tone + 0.05, tone];
        draw_head(&mut img, x, y, r, color);
        points.push([x, y]);
    }
    let img = apply_transform(&img, spec.transform, spec.strength);
    (img, PointAnnotation::new(id, points))
}

/// Render one scene; head centres are the annotation.
pub fn generate_scene<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<(Image, PointAnnotation)> {
    let issues = spec.issues();
    if !issues.is_empty() {
        return Err(Error::InvalidArgument(issues.join("; ")));
    }
    let count = rng.random_range(spec.count_range.0..=spec.count_range.1);
    let mut scene_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    Ok(render(spec, count, "scene", &mut scene_rng))
}

#[derive(Clone, Debug)]
pub struct DomainPair {
    /// Unshifted source-domain samples.
    pub source: Vec<LabeledImage>,
    /// Samples rendered under `spec.transform` / `spec.strength`.
    pub target: Vec<LabeledImage>,
}

/// Source set under the identity transform, target set under the scene's
/// shift. Both sets draw head counts from the same count stream, so the
/// `i`-th target count equals the `i`-th source count.
pub fn generate_domain_pair<R: Rng + ?Sized>(
    spec: &SceneSpec,
    n_train: usize,
    n_test_shifted: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<DomainPair> {
    if n_train == 0 || n_test_shifted == 0 {
        return Err(Error::InvalidArgument("both sets need at least one image".into()));
    }
    let issues = spec.issues();
    if !issues.is_empty() {
        return Err(Error::InvalidArgument(issues.join("; ")));
    }
    let count_seed = rng.next_u64();
    let source_seed = rng.next_u64();
    let target_seed = rng.next_u64();
    let build = |n: usize, seed: u64, prefix: &str, s: &SceneSpec| -> Result<Vec<LabeledImage>> {
        let mut counts = ChaCha8Rng::seed_from_u64(count_seed);
        let mut scenes = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let count = counts.random_range(s.count_range.0..=s.count_range.1);
                let (img, ann) = render(s, count, &format!("{prefix}_{i:04}"), &mut scenes);
                LabeledImage::from_parts(img, ann, sigma, true)
            })
            .collect()
    };
    let source_spec = SceneSpec {
        transform: DomainTransform::Identity,
        strength: 0.0,
        ..spec.clone()
    };
    Ok(DomainPair {
        source: build(n_train, source_seed, "source", &source_spec)?,
        target: build(n_test_shifted, target_seed, "target", spec)?,
    })
}

/// Write images (PNG), annotations (JSON) and a manifest (JSONL) under
/// `dir`; returns the manifest path. Pixel values are quantized to 8 bits.
pub fn write_dataset(dir: &Path, samples: &[LabeledImage], split: &str, label: Option<&str>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let image = PathBuf::from(format!("{}.png", s.id));
        let annotation = PathBuf::from(format!("{}.json", s.id));
        s.image.save_png(&dir.join(&image))?;
        s.points.save(&dir.join(&annotation))?;
        records.push(ManifestRecord {
            image,
            annotation,
            split: split.to_string(),
            label: label.map(str::to_string),
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
