//! Dual-stream counting network and its building blocks.

mod checkpoint;
mod config;
mod features;
mod heads;
mod memory;
mod network;
mod params;

pub use checkpoint::{WeightsFile, MAGIC as CHECKPOINT_MAGIC, SCHEMA_VERSION};
pub(crate) use checkpoint::write_atomic;
pub use config::{Backbone, ModelConfig, Switches, Topology};
pub use features::{
    apply_mask_dropout, apply_mask_scales, compute_cem, draw_channel_dropout, instance_normalize, ContentErrorMask,
    FeatureMap, IN_EPS,
};
pub use heads::{binarize_resize_pcm, upsample_density};
pub use memory::{memory_reconstruct, AttentionScores, MemoryBank};
pub use network::{
    images_to_tensor, round_up, CountingModel, Inference, TrainForward, TrainOutputs, DEEPEST_STRIDE, DENSITY_STRIDE,
};
pub use params::{ParamEntry, ParamStore};
