//! Deterministic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdgcount_core::data::io::LabeledImage;
use sdgcount_core::data::PointAnnotation;
use sdgcount_core::model::FeatureMap;
use sdgcount_core::synthbench::{generate_domain_pair, SceneSpec};
use sdgcount_core::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` uniformly placed heads on an `h × w` canvas.
pub fn annotation(n: usize, h: usize, w: usize, seed: u64) -> PointAnnotation {
    let mut r = rng(seed);
    let pts = (0..n)
        .map(|_| [r.random_range(0.0..w as f64), r.random_range(0.0..h as f64)])
        .collect();
    PointAnnotation::new("bench", pts)
}

/// Standard-normal `[1, c, h, w]` feature map.
pub fn features(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
    FeatureMap::from_tensor(&Tensor::randn(&[1, c, h, w], 1.0, &mut rng(seed)), 0, 8)
}

/// Square synthetic scenes of side `size`.
pub fn scenes(n: usize, size: usize, seed: u64) -> Vec<LabeledImage> {
    let spec = SceneSpec {
        height: size,
        width: size,
        ..SceneSpec::default()
    };
    generate_domain_pair(&spec, n, 1, 4.0, &mut rng(seed)).expect("valid spec").source
}
