//! Feature maps, instance normalization, the content error mask and
//! channel dropout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// ε added to the spatial standard deviation in [`instance_normalize`].
pub const IN_EPS: f64 = 1e-5;

/// One sample's `C × H′ × W′` feature tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Input pixels per feature cell.
    pub stride: usize,
    /// Channel-major values.
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, stride: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            stride,
            values,
        }
    }

    /// Batch entry `n` of an NCHW tensor.
    pub fn from_tensor(t: &Tensor, n: usize, stride: usize) -> Self {
        let (_, c, h, w) = t.dims4();
        let per = c * h * w;
        Self::new(c, h, w, stride, t.data()[n * per..(n + 1) * per].to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.channels, self.height, self.width], self.values.clone())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.values[c * hw..(c + 1) * hw]
    }
}

fn normalize_plane(src: &[f64], dst: &mut [f64]) {
    let n = src.len() as f64;
    let mean = src.iter().sum::<f64>() / n;
    let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + IN_EPS;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - mean) / denom;
    }
}

/// Per-channel spatial standardization: `(x − μ) / (σ + ε)`.
pub fn instance_normalize(f: &FeatureMap) -> Result<FeatureMap> {
    if f.height * f.width < 2 {
        return Err(Error::Shape(format!(
            "instance normalization needs at least 2 spatial positions, got {}x{}",
            f.height, f.width
        )));
    }
    let mut out = f.clone();
    let hw = f.height * f.width;
    for c in 0..f.channels {
        normalize_plane(&f.values[c * hw..(c + 1) * hw], &mut out.values[c * hw..(c + 1) * hw]);
    }
    Ok(out)
}

/// Binary mask over feature elements whose instance-normalized pair
/// discrepancy is within `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentErrorMask {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub alpha: f64,
    pub values: Vec<f64>,
}

impl ContentErrorMask {
    /// Portion of diminished elements, in `[0, 1]`.
    pub fn pde(&self) -> f64 {
        1.0 - self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// `mask[k,i,j] = 1` iff `|IN(f_ori) − IN(f_aug)| ≤ alpha` at that element.
/// The mask is a constant: nothing differentiates through it.
pub fn compute_cem(f_ori: &FeatureMap, f_aug: &FeatureMap, alpha: f64) -> Result<ContentErrorMask> {
    if f_ori.dims() != f_aug.dims() {
        return Err(Error::Shape(format!(
            "content error mask on mismatched features {:?} vs {:?}",
            f_ori.dims(),
            f_aug.dims()
        )));
    }
    let a = instance_normalize(f_ori)?;
    let b = instance_normalize(f_aug)?;
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| if (x - y).abs() <= alpha { 1.0 } else { 0.0 })
        .collect();
    Ok(ContentErrorMask {
        channels: f_ori.channels,
        height: f_ori.height,
        width: f_ori.width,
        alpha,
        values,
    })
}

/// Per-channel survival multipliers: 0 for dropped channels, `1/(1−rate)`
/// for kept ones.
pub fn draw_channel_dropout<R: Rng + ?Sized>(channels: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; channels];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..channels)
        .map(|_| if rng.random_bool(rate) { 0.0 } else { keep })
        .collect()
}

/// `f ⊙ mask`, followed in training by whole-channel dropout.
pub fn apply_mask_dropout<R: Rng + ?Sized>(
    f: &FeatureMap,
    mask: &ContentErrorMask,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<FeatureMap> {
    let scales = if training {
        draw_channel_dropout(f.channels, rate, rng)
    } else {
        vec![1.0; f.channels]
    };
    apply_mask_scales(f, mask, &scales)
}

/// [`apply_mask_dropout`] with a pre-drawn channel multiplier vector, so both
/// streams of a pair can share one draw.
pub fn apply_mask_scales(f: &FeatureMap, mask: &ContentErrorMask, scales: &[f64]) -> Result<FeatureMap> {
    if f.dims() != (mask.channels, mask.height, mask.width) || scales.len() != f.channels {
        return Err(Error::Shape("mask/dropout shape does not match feature map".into()));
    }
    let hw = f.height * f.width;
    let mut out = f.clone();
    for (i, v) in out.values.iter_mut().enumerate() {
        *v *= mask.values[i] * scales[i / hw];
    }
    Ok(out)
}

/// Content error masks for a stacked pair batch `[ori_0..ori_{n-1}, aug_0..aug_{n-1}]`
/// of shape `[2n, C, H, W]`; returns `[n, C, H, W]`.
pub(crate) fn cem_batch(f: &Tensor, alpha: f64) -> Tensor {
    let (n2, c, h, w) = f.dims4();
    let n = n2 / 2;
    let hw = h * w;
    let per = c * hw;
    let mut mask = Tensor::zeros(&[n, c, h, w]);
    let mut a = vec![0.0; hw];
    let mut b = vec![0.0; hw];
    for ni in 0..n {
        for ci in 0..c {
            let off_o = ni * per + ci * hw;
            let off_a = (ni + n) * per + ci * hw;
            normalize_plane(&f.data()[off_o..off_o + hw], &mut a);
            normalize_plane(&f.data()[off_a..off_a + hw], &mut b);
            let dst = &mut mask.data_mut()[ni * per + ci * hw..ni * per + (ci + 1) * hw];
            for ((d, x), y) in dst.iter_mut().zip(&a).zip(&b) {
                *d = if (x - y).abs() <= alpha { 1.0 } else { 0.0 };
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::randn(&[1, c, h, w], 1.0, &mut rng);
        FeatureMap::from_tensor(&t, 0, 8)
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let f = FeatureMap::new(1, 2, 2, 8, vec![3.0; 4]);
        assert!(instance_normalize(&f).unwrap().values.iter().all(|&v| v == 0.0));
        assert!(instance_normalize(&FeatureMap::new(1, 1, 1, 8, vec![1.0])).is_err());
    }

    #[test]
    fn normalized_input_is_fixed_point() {
        let f = instance_normalize(&random_map(3, 4, 5, 1)).unwrap();
        let g = instance_normalize(&f).unwrap();
        for (a, b) in f.values.iter().zip(&g.values) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn affine_shift_is_removed() {
        let f = random_map(2, 4, 4, 2);
        let mut g = f.clone();
        let hw = 16;
        for (i, v) in g.values.iter_mut().enumerate() {
            let (a, b) = if i / hw == 0 { (3.5, -2.0) } else { (0.2, 7.0) };
            *v = a * *v + b;
        }
        let nf = instance_normalize(&f).unwrap();
        let ng = instance_normalize(&g).unwrap();
        for (a, b) in nf.values.iter().zip(&ng.values) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn identical_pair_keeps_everything() {
        let f = random_map(4, 3, 3, 3);
        let m = compute_cem(&f, &f, 0.5).unwrap();
        assert!(m.values.iter().all(|&v| v == 1.0));
        assert_eq!(m.pde(), 0.0);
        let g = random_map(4, 3, 3, 4);
        assert_eq!(compute_cem(&f, &g, f64::INFINITY).unwrap().pde(), 0.0);
    }

    #[test]
    fn hand_built_pair() {
        // Both inputs are already zero-mean with unit variance, so IN only
        // rescales them by 1/(1+ε). The first two discrepancies are 0.2 and 0.6.
        let ori = FeatureMap::new(1, 2, 2, 8, vec![1.0, -1.0, 1.0, -1.0]);
        let disc = (0.16f64 + 4.0 * 1.52).sqrt();
        let (b3, b4) = ((-0.4 + disc) / 2.0, (-0.4 - disc) / 2.0);
        let aug = FeatureMap::new(1, 2, 2, 8, vec![0.8, -0.4, b3, b4]);
        let na = instance_normalize(&aug).unwrap();
        for (x, y) in na.values.iter().zip(&aug.values) {
            assert!((x - y / (1.0 + IN_EPS)).abs() < 1e-9);
        }
        let m = compute_cem(&ori, &aug, 0.5).unwrap();
        assert_eq!(&m.values[..2], &[1.0, 0.0]);
        assert_eq!(m.values, vec![1.0, 0.0, 1.0, 1.0]);
        assert_eq!(m.pde(), 0.25);
    }

    #[test]
    fn mismatched_shapes_error() {
        assert!(compute_cem(&random_map(2, 3, 3, 1), &random_map(3, 3, 3, 1), 0.5).is_err());
    }

    #[test]
    fn dropout_semantics() {
        let f = random_map(3, 2, 2, 5);
        let g = random_map(3, 2, 2, 6);
        let m = compute_cem(&f, &g, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let masked = apply_mask_dropout(&f, &m, 0.0, true, &mut rng).unwrap();
        let expect: Vec<f64> = f.values.iter().zip(&m.values).map(|(a, b)| a * b).collect();
        assert_eq!(masked.values, expect);
        let eval = apply_mask_dropout(&f, &m, 0.9, false, &mut rng).unwrap();
        assert_eq!(eval.values, expect);
    }

    #[test]
    fn dropout_survival_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2023);
        let trials = 1000;
        let survived = (0..trials)
            .filter(|_| draw_channel_dropout(1, 0.5, &mut rng)[0] > 0.0)
            .count();
        let frac = survived as f64 / trials as f64;
        assert!((frac - 0.5).abs() <= 0.1, "{frac}");
    }

    #[test]
    fn batch_mask_matches_per_sample_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Tensor::randn(&[4, 3, 2, 3], 1.0, &mut rng);
        let m = cem_batch(&t, 0.4);
        for n in 0..2 {
            let a = FeatureMap::from_tensor(&t, n, 8);
            let b = FeatureMap::from_tensor(&t, n + 2, 8);
            let single = compute_cem(&a, &b, 0.4).unwrap();
            assert_eq!(&m.data()[n * 18..(n + 1) * 18], &single.values[..]);
        }
    }

    proptest! {
        #[test]
        fn cem_symmetric_and_pde_monotone(seed in 0u64..500) {
            let f = random_map(3, 3, 4, seed);
            let g = random_map(3, 3, 4, seed + 10_000);
            let mut last = f64::INFINITY;
            for alpha in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, f64::INFINITY] {
                let m1 = compute_cem(&f, &g, alpha).unwrap();
                let m2 = compute_cem(&g, &f, alpha).unwrap();
                prop_assert_eq!(&m1.values, &m2.values);
                prop_assert!(m1.pde() <= last);
                last = m1.pde();
            }
            prop_assert_eq!(last, 0.0);
        }
    }
}
