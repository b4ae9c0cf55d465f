//! Target persistence: `.npy` arrays plus a JSON sidecar carrying the
//! generation parameters.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};

use super::{generate_density_map, DensityMap, Image, ManifestRecord, PatchClassMap, PointAnnotation};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSidecar {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub scale: f64,
    pub sigma: f64,
    pub patch_size: usize,
    pub renormalize: bool,
    /// Digest of the annotation bytes the targets were generated from.
    pub source_digest: String,
}

fn to_array(h: usize, w: usize, values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((h, w), values.to_vec()).expect("shape matches")
}

pub fn save_density(path: &Path, d: &DensityMap) -> Result<()> {
    write_npy(path, &to_array(d.height, d.width, &d.values)).map_err(|e| Error::format(path, e))
}

pub fn load_density(path: &Path, scale: f64) -> Result<DensityMap> {
    let a: Array2<f64> = read_npy(path).map_err(|e| Error::format(path, e))?;
    let (h, w) = a.dim();
    Ok(DensityMap {
        height: h,
        width: w,
        values: a.iter().copied().collect(),
        scale,
    })
}

pub fn save_pcm(path: &Path, p: &PatchClassMap) -> Result<()> {
    write_npy(path, &to_array(p.rows, p.cols, &p.values)).map_err(|e| Error::format(path, e))
}

pub fn load_pcm(path: &Path, patch_size: usize) -> Result<PatchClassMap> {
    let a: Array2<f64> = read_npy(path).map_err(|e| Error::format(path, e))?;
    let (h, w) = a.dim();
    Ok(PatchClassMap::new(h, w, patch_size, a.iter().copied().collect()))
}

pub fn save_sidecar(path: &Path, s: &TargetSidecar) -> Result<()> {
    let text = serde_json::to_string_pretty(s).expect("sidecar serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_sidecar(path: &Path) -> Result<TargetSidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

/// Hex SHA-256 of a byte string.
pub fn digest(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Output paths `<dir>/<id>.density.npy`, `<id>.pcm.npy`, `<id>.json`.
pub fn target_paths(dir: &Path, image_id: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{image_id}.density.npy")),
        dir.join(format!("{image_id}.pcm.npy")),
        dir.join(format!("{image_id}.json")),
    )
}

/// An image with its annotation and physical-scale density map.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub id: String,
    pub image: Image,
    pub points: PointAnnotation,
    pub density: DensityMap,
}

impl LabeledImage {
    pub fn from_parts(image: Image, points: PointAnnotation, sigma: f64, renormalize: bool) -> Result<Self> {
        let density = generate_density_map(&points, image.height, image.width, sigma, renormalize)?;
        Ok(Self {
            id: points.image_id.clone(),
            image,
            points,
            density,
        })
    }

    pub fn count(&self) -> f64 {
        self.points.count() as f64
    }
}

/// Load every record; problems are reported together.
pub fn load_records(records: &[ManifestRecord], sigma: f64, renormalize: bool) -> Result<Vec<LabeledImage>> {
    let mut out = Vec::new();
    let mut problems = Vec::new();
    for r in records {
        let loaded = Image::load(&r.image).and_then(|img| {
            let ann = PointAnnotation::load(&r.annotation)?;
            LabeledImage::from_parts(img, ann, sigma, renormalize)
        });
        match loaded {
            Ok(l) => out.push(l),
            Err(Error::Data(items)) => problems.extend(items),
            Err(e) => problems.push(e.to_string()),
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Data(problems))
    }
}

/// Outcome of [`prepare_targets`]: image ids whose targets were (re)written
/// or found up to date.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrepareReport {
    pub written: Vec<String>,
    pub skipped: Vec<String>,
}

/// Materialize density and patch-map targets for every record under `dir`.
/// A record is skipped when its sidecar matches the current inputs (digest of
/// image and annotation bytes) and generation parameters. Per-record
/// problems are reported together.
pub fn prepare_targets(
    records: &[ManifestRecord],
    dir: &Path,
    sigma: f64,
    patch_size: usize,
    renormalize: bool,
) -> Result<PrepareReport> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut report = PrepareReport::default();
    let mut problems = Vec::new();
    for r in records {
        match prepare_one(r, dir, sigma, patch_size, renormalize) {
            Ok((id, true)) => report.written.push(id),
            Ok((id, false)) => report.skipped.push(id),
            Err(Error::Data(items)) => problems.extend(items),
            Err(e) => problems.push(e.to_string()),
        }
    }
    if problems.is_empty() {
        Ok(report)
    } else {
        Err(Error::Data(problems))
    }
}

fn prepare_one(r: &ManifestRecord, dir: &Path, sigma: f64, patch_size: usize, renormalize: bool) -> Result<(String, bool)> {
    let ann_bytes = std::fs::read(&r.annotation).map_err(|e| Error::io(&r.annotation, e))?;
    let img_bytes = std::fs::read(&r.image).map_err(|e| Error::io(&r.image, e))?;
    let source_digest = digest(&[digest(&img_bytes).as_bytes(), digest(&ann_bytes).as_bytes()].concat());
    let points: PointAnnotation = serde_json::from_slice(&ann_bytes).map_err(|e| Error::format(&r.annotation, e))?;
    let (dpath, ppath, spath) = target_paths(dir, &points.image_id);
    if dpath.is_file() && ppath.is_file() {
        if let Ok(old) = load_sidecar(&spath) {
            if old.source_digest == source_digest
                && old.sigma == sigma
                && old.patch_size == patch_size
                && old.renormalize == renormalize
            {
                return Ok((points.image_id, false));
            }
        }
    }
    let image = Image::load(&r.image)?;
    let density = generate_density_map(&points, image.height, image.width, sigma, renormalize)?;
    let h = image.height.div_ceil(patch_size) * patch_size;
    let w = image.width.div_ceil(patch_size) * patch_size;
    let pcm = super::generate_pcm_gt(&density.pad_to(h, w), patch_size)?;
    save_density(&dpath, &density)?;
    save_pcm(&ppath, &pcm)?;
    save_sidecar(
        &spath,
        &TargetSidecar {
            image_id: points.image_id.clone(),
            height: image.height,
            width: image.width,
            count: points.count(),
            scale: density.scale,
            sigma,
            patch_size,
            renormalize,
            source_digest,
        },
    )?;
    Ok((points.image_id, true))
}
