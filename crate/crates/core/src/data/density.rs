use serde::{Deserialize, Serialize};

use super::PointAnnotation;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default Gaussian width, in pixels.
pub const DEFAULT_SIGMA: f64 = 4.0;

/// Kernel support half-width in units of sigma.
const TRUNCATE_SIGMAS: f64 = 4.0;

/// Non-negative per-pixel density. `sum / scale` is the head count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub scale: f64,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
            scale: 1.0,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Head count represented by this map.
    pub fn count(&self) -> f64 {
        self.sum() / self.scale
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> DensityMap {
        assert!(top + height <= self.height && left + width <= self.width, "crop out of bounds");
        let mut values = Vec::with_capacity(height * width);
        for y in top..top + height {
            values.extend_from_slice(&self.values[y * self.width + left..y * self.width + left + width]);
        }
        DensityMap {
            height,
            width,
            values,
            scale: self.scale,
        }
    }

    pub fn flip_horizontal(&self) -> DensityMap {
        let mut out = self.clone();
        for row in out.values.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    /// Zero-pad on the bottom/right up to the given size.
    pub fn pad_to(&self, height: usize, width: usize) -> DensityMap {
        assert!(height >= self.height && width >= self.width);
        let mut out = DensityMap {
            height,
            width,
            values: vec![0.0; height * width],
            scale: self.scale,
        };
        for y in 0..self.height {
            out.values[y * width..y * width + self.width]
                .copy_from_slice(&self.values[y * self.width..(y + 1) * self.width]);
        }
        out
    }

    /// Mass-preserving downsampling: each output cell is the sum of a
    /// `factor × factor` block.
    pub fn sum_pool(&self, factor: usize) -> Result<DensityMap> {
        if !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::Shape(format!(
                "density {}x{} not divisible by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut values = vec![0.0; h * w];
        for y in 0..self.height {
            for x in 0..self.width {
                values[(y / factor) * w + x / factor] += self.values[y * self.width + x];
            }
        }
        Ok(DensityMap {
            height: h,
            width: w,
            values,
            scale: self.scale,
        })
    }

    /// `[1, 1, H, W]` tensor view of the values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.values.clone())
    }
}

/// Sum of one truncated 2-D Gaussian per head. Pixel `(row, col)` is sampled
/// at coordinate `(col, row)`; the kernel covers pixels within `4σ` of the head
/// along each axis.
///
/// With `renormalize`, each head's kernel is divided by its in-image mass so
/// every head contributes exactly 1. Without it, the kernel is divided by its
/// full (untruncated-by-image) window mass, and heads near the border lose
/// the mass that falls outside.
pub fn generate_density_map(
    points: &PointAnnotation,
    height: usize,
    width: usize,
    sigma: f64,
    renormalize: bool,
) -> Result<DensityMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("empty canvas {width}x{height}")));
    }
    points.validate(height, width)?;

    let mut map = DensityMap::zeros(height, width);
    let radius = TRUNCATE_SIGMAS * sigma;
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut kx = Vec::new();
    let mut ky = Vec::new();
    for &[px, py] in &points.points {
        // Separable kernel: weights along each axis over the full window.
        let axis = |center: f64, out: &mut Vec<(isize, f64)>| {
            out.clear();
            let lo = (center - radius).ceil() as isize;
            let hi = (center + radius).floor() as isize;
            for i in lo..=hi {
                let d = i as f64 - center;
                out.push((i, (-d * d * inv_two_var).exp()));
            }
        };
        axis(px, &mut kx);
        axis(py, &mut ky);
        let inside = |v: &[(isize, f64)], len: usize| -> f64 {
            v.iter().filter(|(i, _)| *i >= 0 && (*i as usize) < len).map(|(_, w)| w).sum()
        };
        let norm = if renormalize {
            inside(&kx, width) * inside(&ky, height)
        } else {
            kx.iter().map(|(_, w)| w).sum::<f64>() * ky.iter().map(|(_, w)| w).sum::<f64>()
        };
        for &(y, wy) in &ky {
            if y < 0 || y as usize >= height {
                continue;
            }
            let row = &mut map.values[y as usize * width..(y as usize + 1) * width];
            for &(x, wx) in &kx {
                if x < 0 || x as usize >= width {
                    continue;
                }
                row[x as usize] += wy * wx / norm;
            }
        }
    }
    Ok(map)
}

/// Multiply values and the scale field by `factor`; `count()` is unchanged.
pub fn scale_density(density: &DensityMap, factor: f64) -> Result<DensityMap> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale factor must be positive, got {factor}")));
    }
    let mut out = density.clone();
    out.values.iter_mut().for_each(|v| *v *= factor);
    out.scale *= factor;
    Ok(out)
}
