//! Attention memory bank: every feature vector is rebuilt as a softmax
//! attention over a learnable set of memory vectors.

use rand::Rng;

use super::FeatureMap;
use crate::autograd::{attention_read, attention_scores};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `count × dim` learnable memory vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub count: usize,
    pub dim: usize,
    pub vectors: Vec<f64>,
}

impl MemoryBank {
    pub fn new(count: usize, dim: usize, vectors: Vec<f64>) -> Self {
        assert!(count >= 1, "memory bank needs at least one vector");
        assert_eq!(vectors.len(), count * dim);
        Self { count, dim, vectors }
    }

    pub fn random<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Self {
        Self::new(count, dim, Tensor::randn(&[count, dim], 1.0, rng).into_data())
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.vectors[m * self.dim..(m + 1) * self.dim]
    }

    pub(crate) fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.count, self.dim], self.vectors.clone())
    }
}

/// `(H′·W′) × M` attention weights; each row lies on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionScores {
    pub positions: usize,
    pub memory: usize,
    pub values: Vec<f64>,
}

impl AttentionScores {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.memory..(r + 1) * self.memory]
    }
}

/// `A = softmax(F·Vᵀ/√C)` over memory rows, then `F̃ = A·V`.
pub fn memory_reconstruct(f: &FeatureMap, bank: &MemoryBank) -> Result<(AttentionScores, FeatureMap)> {
    if f.channels != bank.dim {
        return Err(Error::Shape(format!(
            "feature dim {} does not match memory dim {}",
            f.channels, bank.dim
        )));
    }
    let v = bank.to_tensor();
    let a = attention_scores(&f.to_tensor(), &v);
    let r = attention_read(&a, &v, (f.channels, f.height, f.width));
    let attn = AttentionScores {
        positions: f.height * f.width,
        memory: bank.count,
        values: a.into_data(),
    };
    Ok((attn, FeatureMap::from_tensor(&r, 0, f.stride)))
}
