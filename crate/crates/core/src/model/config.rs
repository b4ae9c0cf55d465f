use serde::{Deserialize, Serialize};

/// Feature-extractor preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// VGG16-BN channel widths.
    Vgg16Bn,
    /// Narrow five-level stack for desk-scale runs and tests.
    Tiny,
}

/// Channel layout derived from a [`Backbone`] preset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    /// `(width, convs)` per encoder level; each level ends in a 2×2 max-pool.
    pub levels: Vec<(usize, usize)>,
    /// Width of the stride-16 decoder stage.
    pub decoder_mid: usize,
    pub pc_hidden: usize,
}

impl Backbone {
    pub fn topology(self) -> Topology {
        match self {
            Backbone::Vgg16Bn => Topology {
                levels: vec![(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)],
                decoder_mid: 512,
                pc_hidden: 256,
            },
            Backbone::Tiny => Topology {
                levels: vec![(16, 1), (16, 1), (32, 1), (64, 1), (64, 1)],
                decoder_mid: 32,
                pc_hidden: 32,
            },
        }
    }
}

/// Ablation switches for the four mechanisms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Switches {
    /// Attention memory bank reconstruction.
    pub amb: bool,
    /// Content error mask.
    pub cem: bool,
    /// Attention consistency loss.
    pub acl: bool,
    /// Patch-wise classification and density masking.
    pub pc: bool,
}

impl Switches {
    pub const ALL: Switches = Switches {
        amb: true,
        cem: true,
        acl: true,
        pc: true,
    };
    pub const NONE: Switches = Switches {
        amb: false,
        cem: false,
        acl: false,
        pc: false,
    };
}

impl Default for Switches {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of memory vectors M.
    pub memory_count: usize,
    /// Memory / reconstruction-feature dimension C.
    pub memory_dim: usize,
    /// Content-error threshold α on instance-normalized discrepancies.
    pub alpha: f64,
    /// Whole-channel dropout rate applied after masking.
    pub dropout_rate: f64,
    /// Patch size P of the classification map, in pixels.
    pub patch_size: usize,
    /// Probability at or above which a patch counts as occupied.
    pub pcm_threshold: f64,
    pub backbone: Backbone,
    /// Optional weights container to initialise matching tensors from; empty for none.
    pub pretrained_weights: String,
    pub switches: Switches,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            memory_count: 1024,
            memory_dim: 256,
            alpha: 0.5,
            dropout_rate: 0.1,
            patch_size: 16,
            pcm_threshold: 0.5,
            backbone: Backbone::Vgg16Bn,
            pretrained_weights: String::new(),
            switches: Switches::ALL,
        }
    }
}

impl ModelConfig {
    /// Small model used by tests and the synthetic benchmark.
    pub fn tiny() -> Self {
        Self {
            memory_count: 32,
            memory_dim: 16,
            backbone: Backbone::Tiny,
            ..Self::default()
        }
    }

    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.memory_count == 0 {
            out.push("model.memory_count must be at least 1".to_string());
        }
        if self.memory_dim == 0 {
            out.push("model.memory_dim must be at least 1".to_string());
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            out.push(format!("model.alpha = {} must be non-negative", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            out.push(format!("model.dropout_rate = {} must lie in [0, 1)", self.dropout_rate));
        }
        if !matches!(self.patch_size, 8 | 16 | 32) {
            out.push(format!("model.patch_size = {} must be one of 8, 16, 32", self.patch_size));
        }
        if !(0.0..=1.0).contains(&self.pcm_threshold) {
            out.push(format!("model.pcm_threshold = {} is not a probability", self.pcm_threshold));
        }
        out
    }
}
