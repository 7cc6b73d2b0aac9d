//! The cascaded upsampler.
//!
//! Each stage extracts per-point features (point MLPs, pooled global context,
//! and a local vector-attention layer over coordinate neighbors), expands them
//! `r`-fold through a duplicate branch and a transposed-convolution branch,
//! and regresses per-point offsets added to the duplicated input coordinates.
//! The standard cascade runs stages with rates 2, 2, 1.

mod checkpoint;
mod config;
mod params;
mod stage;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ChannelPlan, FeatureExtractor, StageConfig};
pub use params::{AttentionParams, Dense, DeconvParams, NetworkParams, StageParams};
pub use stage::{
    cascade_forward, expand_features, extract_features, reconstruct_coordinates, stage_forward, AttentionVars,
    CascadeOutputs, DenseVars, NetworkVars, StageVars,
};
