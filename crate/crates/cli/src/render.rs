//! Static renderers for density maps and patch maps. Every output has the
//! size of the input image.

use sdgcount_core::data::{DensityMap, Image, PatchClassMap};

/// Blue → cyan → yellow → red ramp over `t ∈ [0, 1]`.
fn ramp(t: f64) -> [f64; 3] {
    const STOPS: [[f64; 3]; 4] = [[0.0, 0.0, 0.5], [0.0, 0.8, 1.0], [1.0, 1.0, 0.0], [0.8, 0.0, 0.0]];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    std::array::from_fn(|c| STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f)
}

/// Heat-map normalized by the map's maximum; an all-zero map renders
/// uniformly at the cold end.
pub fn density_heatmap(d: &DensityMap) -> Image {
    let max = d.values.iter().copied().fold(0.0, f64::max);
    let mut out = Image::new(d.height, d.width);
    for y in 0..d.height {
        for x in 0..d.width {
            let t = if max > 0.0 { d.get(y, x) / max } else { 0.0 };
            let rgb = ramp(t);
            for (c, v) in rgb.into_iter().enumerate() {
                out.set(c, y, x, v);
            }
        }
    }
    out
}

const GRID: [f64; 3] = [1.0, 1.0, 1.0];
const TINT: [f64; 3] = [1.0, 0.1, 0.1];

/// The image tinted by patch value (0 = untouched, 1 = full tint at 50 %),
/// with grid lines on every row and column that is a multiple of the patch
/// size.
pub fn pcm_overlay(image: &Image, pcm: &PatchClassMap) -> Image {
    let p = pcm.patch_size;
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let (i, j) = (y / p, x / p);
            let v = if i < pcm.rows && j < pcm.cols { pcm.get(i, j) } else { 0.0 };
            let on_grid = y % p == 0 || x % p == 0;
            for c in 0..3 {
                let base = image.get(c, y, x);
                let px = if on_grid { GRID[c] } else { base + 0.5 * v * (TINT[c] - base) };
                out.set(c, y, x, px);
            }
        }
    }
    out
}
