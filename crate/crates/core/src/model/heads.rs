use crate::data::{DensityMap, PatchClassMap};
use crate::error::{Error, Result};
use crate::tensor::{upsample_bilinear, Tensor};

/// Binarize a patch map (`≥ threshold` → 1) and expand it by nearest
/// neighbour to a `target` grid whose dimensions are integer multiples of the
/// patch grid. Returns the row-major `target.0 × target.1` mask.
pub fn binarize_resize_pcm(pcm: &PatchClassMap, threshold: f64, target: (usize, usize)) -> Result<Vec<f64>> {
    let (th, tw) = target;
    if th == 0 || tw == 0 || th % pcm.rows != 0 || tw % pcm.cols != 0 {
        return Err(Error::Shape(format!(
            "target {th}x{tw} is not a multiple of the {}x{} patch grid",
            pcm.rows, pcm.cols
        )));
    }
    let (fy, fx) = (th / pcm.rows, tw / pcm.cols);
    let mut out = vec![0.0; th * tw];
    for y in 0..th {
        for x in 0..tw {
            out[y * tw + x] = if pcm.get(y / fy, x / fx) >= threshold { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}

/// Bilinear ×`factor` upsampling followed by division by `factor²`, so the
/// total mass is unchanged.
pub fn upsample_density(d: &DensityMap, factor: usize) -> DensityMap {
    let t = Tensor::from_vec(&[1, 1, d.height, d.width], d.values.clone());
    let mut up = upsample_bilinear(&t, factor);
    up.scale(1.0 / (factor * factor) as f64);
    DensityMap {
        height: d.height * factor,
        width: d.width * factor,
        values: up.into_data(),
        scale: d.scale,
    }
}
