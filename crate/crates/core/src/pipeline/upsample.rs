//! Patch-based inference: split, normalize, upsample, merge, resample.

use rayon::prelude::*;

use super::patches::extract_covering_patches;
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, Point, PointCloud};
use crate::network::NetworkParams;

pub const DEFAULT_PATCH_SIZE: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleOptions {
    /// Input points per patch; clouds smaller than this form one patch.
    pub patch_size: usize,
    /// Seed count per pass; `None` uses `ceil(3 M / patch_size)`.
    pub num_seeds: Option<usize>,
    /// Run each patch in its own unit-sphere frame.
    pub normalize_patches: bool,
    pub threads: usize,
}

impl Default for UpsampleOptions {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            num_seeds: None,
            normalize_patches: true,
            threads: 1,
        }
    }
}

/// Upsamples `cloud` by `r_total` (4, or 16 by applying the network twice).
pub fn upsample_cloud(cloud: &PointCloud, params: &NetworkParams, r_total: usize, use_refiner: bool) -> Result<PointCloud> {
    upsample_cloud_with(cloud, params, r_total, use_refiner, &UpsampleOptions::default())
}

pub fn upsample_cloud_with(
    cloud: &PointCloud,
    params: &NetworkParams,
    r_total: usize,
    use_refiner: bool,
    opts: &UpsampleOptions,
) -> Result<PointCloud> {
    let rate: usize = params.inference_stages(use_refiner).iter().map(|s| s.config.rate).product();
    let passes = match r_total {
        r if r == rate => 1,
        r if r == rate * rate => 2,
        _ => {
            return Err(Error::arg(format!(
                "upsampling rate {r_total} is not supported by a x{rate} network (use {rate} or {})",
                rate * rate
            )))
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| Error::arg(format!("thread pool: {e}")))?;
    let mut current = cloud.clone();
    for _ in 0..passes {
        current = pool.install(|| upsample_once(&current, params, rate, use_refiner, opts))?;
    }
    Ok(current)
}

fn upsample_once(cloud: &PointCloud, params: &NetworkParams, rate: usize, use_refiner: bool, opts: &UpsampleOptions) -> Result<PointCloud> {
    let m = cloud.len();
    if m == 0 {
        return Err(Error::EmptyInput("upsample_cloud"));
    }
    let k = params.stages.iter().map(|s| s.config.k_attention).max().unwrap_or(1);
    let patch_size = opts.patch_size.min(m);
    if patch_size < k {
        return Err(Error::arg(format!(
            "patches of {patch_size} points are smaller than the attention neighbourhood k = {k}"
        )));
    }
    let set = extract_covering_patches(cloud, opts.num_seeds, patch_size)?;
    let outputs: Vec<Result<Vec<Point>>> = set
        .patches
        .par_iter()
        .map(|patch| {
            let (input, norm) = if opts.normalize_patches {
                (patch.cloud.points().to_vec(), Some(patch.normalization))
            } else {
                (patch.raw_points().into_points(), None)
            };
            let mut stages = params.forward_points(&input, use_refiner)?;
            let out = stages.pop().expect("at least one stage");
            Ok(match norm {
                Some(n) => out.iter().map(|p| n.invert(p)).collect(),
                None => out,
            })
        })
        .collect();
    let mut merged = Vec::with_capacity(set.len() * patch_size * rate);
    for out in outputs {
        merged.extend(out?);
    }
    let target = rate * m;
    if merged.len() < target {
        return Err(Error::arg(format!(
            "patches produced {} points, fewer than the {target} requested",
            merged.len()
        )));
    }
    let keep = farthest_point_sample(&merged, target, 0)?;
    PointCloud::new(keep.into_iter().map(|i| merged[i]).collect())
}
