use serde::{Deserialize, Serialize};

use super::DensityMap;
use crate::error::{Error, Result};

/// Patch sums at or below this are treated as empty.
pub const PATCH_EMPTY_TOLERANCE: f64 = 1e-12;

/// Per-patch head presence: `{0, 1}` labels or `[0, 1]` probabilities on a
/// `rows × cols` grid of `patch_size`-pixel patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchClassMap {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub values: Vec<f64>,
}

impl PatchClassMap {
    pub fn new(rows: usize, cols: usize, patch_size: usize, values: Vec<f64>) -> Self {
        assert_eq!(rows * cols, values.len());
        Self {
            rows,
            cols,
            patch_size,
            values,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn flip_horizontal(&self) -> PatchClassMap {
        let mut out = self.clone();
        for row in out.values.chunks_mut(self.cols) {
            row.reverse();
        }
        out
    }

    /// Threshold probabilities (`≥ threshold` → 1).
    pub fn binarize(&self, threshold: f64) -> PatchClassMap {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = if *v >= threshold { 1.0 } else { 0.0 });
        out
    }

    pub fn crop_cells(&self, rows: usize, cols: usize) -> PatchClassMap {
        assert!(rows <= self.rows && cols <= self.cols);
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            values.extend_from_slice(&self.values[i * self.cols..i * self.cols + cols]);
        }
        PatchClassMap::new(rows, cols, self.patch_size, values)
    }
}

/// Ground-truth patch map: a patch is labelled 1 iff the density mass inside
/// it exceeds [`PATCH_EMPTY_TOLERANCE`].
pub fn generate_pcm_gt(density: &DensityMap, patch_size: usize) -> Result<PatchClassMap> {
    if patch_size == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    if !density.height.is_multiple_of(patch_size) || !density.width.is_multiple_of(patch_size) {
        return Err(Error::Shape(format!(
            "density map {}x{} is not divisible by patch size {patch_size}; pad or crop it first",
            density.width, density.height
        )));
    }
    let (rows, cols) = (density.height / patch_size, density.width / patch_size);
    let mut sums = vec![0.0; rows * cols];
    for y in 0..density.height {
        let i = y / patch_size;
        for (x, v) in density.values[y * density.width..(y + 1) * density.width].iter().enumerate() {
            sums[i * cols + x / patch_size] += v;
        }
    }
    let values = sums
        .into_iter()
        .map(|s| if s > PATCH_EMPTY_TOLERANCE { 1.0 } else { 0.0 })
        .collect();
    Ok(PatchClassMap::new(rows, cols, patch_size, values))
}
