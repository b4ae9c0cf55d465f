//! Point annotations, ground-truth targets, paired augmentation and dataset
//! manifests.

mod augment;
mod density;
mod image;
pub mod io;
mod manifest;
mod pcm;

pub use augment::{augment_pair, photometric, AugmentationConfig, Sample};
pub use density::{generate_density_map, scale_density, DensityMap, DEFAULT_SIGMA};
pub use image::Image;
pub use manifest::{build_splits, load_manifest, write_manifest, ManifestRecord, SampleManifest};
pub use pcm::{generate_pcm_gt, PatchClassMap, PATCH_EMPTY_TOLERANCE};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Head-centre coordinates for one image. `x` is the pixel column, `y` the
/// pixel row.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointAnnotation {
    pub image_id: String,
    pub points: Vec<[f64; 2]>,
}

impl PointAnnotation {
    pub fn new(image_id: impl Into<String>, points: Vec<[f64; 2]>) -> Self {
        Self {
            image_id: image_id.into(),
            points,
        }
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Every point must lie in `[0, width) × [0, height)`.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let bad: Vec<String> = self
            .points
            .iter()
            .enumerate()
            .filter(|(_, [x, y])| {
                !(x.is_finite() && y.is_finite() && *x >= 0.0 && *y >= 0.0 && *x < width as f64 && *y < height as f64)
            })
            .map(|(i, [x, y])| {
                format!(
                    "{}: point #{i} ({x}, {y}) outside image bounds {width}x{height}",
                    self.image_id
                )
            })
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(bad))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("annotation serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
