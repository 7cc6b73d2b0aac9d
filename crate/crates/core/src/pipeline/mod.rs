//! Data in and out of the network: synthetic shapes, file formats, patch
//! extraction, patch-based upsampling and evaluation.

mod eval;
mod io;
mod patches;
mod shapes;
mod upsample;

pub use eval::{evaluate, Metrics};
pub use io::{read_cloud, read_manifest, read_mesh, write_cloud, CloudFormat, ManifestEntry};
pub use patches::{default_seed_count, extract_covering_patches, extract_patches, toy_corpus, Patch, PatchSet};
pub use shapes::{generate_shape, parse_toy_uri, toy_surface};
pub use upsample::{upsample_cloud, upsample_cloud_with, UpsampleOptions, DEFAULT_PATCH_SIZE};
