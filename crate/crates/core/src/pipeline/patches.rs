//! Splitting clouds into seed-centered, unit-sphere-normalized patches.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::shapes::generate_shape;
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn_indices, normalize_to_unit_sphere, AnalyticSurface, Normalization, PointCloud};

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// Normalized patch points; the record is attached to the cloud as well.
    pub cloud: PointCloud,
    pub normalization: Normalization,
    /// Index of the seed in the source cloud.
    pub seed_index: usize,
    /// Source indices of the patch points, nearest to the seed first.
    pub indices: Vec<usize>,
    /// Which source cloud the patch came from.
    pub source: usize,
}

impl Patch {
    /// Patch points back in source coordinates.
    pub fn raw_points(&self) -> PointCloud {
        self.cloud.denormalized()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    /// Point count of every source cloud, indexed by `Patch::source`.
    pub source_sizes: Vec<usize>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Appends `other`, renumbering its sources after ours.
    pub fn extend(&mut self, other: PatchSet) {
        let offset = self.source_sizes.len();
        self.source_sizes.extend(other.source_sizes);
        self.patches.extend(other.patches.into_iter().map(|mut p| {
            p.source += offset;
            p
        }));
    }

    /// True when every source point lies in at least one patch.
    pub fn covers_sources(&self) -> bool {
        let mut seen: Vec<Vec<bool>> = self.source_sizes.iter().map(|&n| vec![false; n]).collect();
        for p in &self.patches {
            for &i in &p.indices {
                seen[p.source][i] = true;
            }
        }
        seen.iter().flatten().all(|&b| b)
    }
}

/// `ceil(3 M / patch_size)`.
pub fn default_seed_count(cloud_len: usize, patch_size: usize) -> usize {
    (3 * cloud_len).div_ceil(patch_size.max(1))
}

fn make_patch(cloud: &PointCloud, seed_index: usize, indices: Vec<usize>) -> Result<Patch> {
    let raw = PointCloud::new(indices.iter().map(|&i| cloud.points()[i]).collect())?;
    let (normalized, normalization) = normalize_to_unit_sphere(&raw)?;
    Ok(Patch {
        cloud: normalized,
        normalization,
        seed_index,
        indices,
        source: 0,
    })
}

fn check_sizes(cloud: &PointCloud, num_seeds: usize, patch_size: usize) -> Result<()> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("extract_patches"));
    }
    if patch_size == 0 || patch_size > cloud.len() {
        return Err(Error::arg(format!(
            "patch size {patch_size} must be in 1..={} (cloud size)",
            cloud.len()
        )));
    }
    if num_seeds == 0 {
        return Err(Error::arg("extract_patches needs at least one seed"));
    }
    Ok(())
}

/// Exactly `num_seeds` patches around farthest-point seeds (first seed is
/// point 0), each the `patch_size` nearest neighbours of its seed.
pub fn extract_patches(cloud: &PointCloud, num_seeds: usize, patch_size: usize) -> Result<PatchSet> {
    check_sizes(cloud, num_seeds, patch_size)?;
    let seeds = farthest_point_sample(cloud.points(), num_seeds.min(cloud.len()), 0)?;
    let seed_points: Vec<_> = seeds.iter().map(|&s| cloud.points()[s]).collect();
    let nbrs = knn_indices(cloud.points(), &seed_points, patch_size)?;
    let patches = seeds
        .iter()
        .enumerate()
        .map(|(q, &s)| make_patch(cloud, s, nbrs.row(q).to_vec()))
        .collect::<Result<_>>()?;
    Ok(PatchSet {
        patches,
        source_sizes: vec![cloud.len()],
    })
}

/// Patches that cover every point of `cloud`.
///
/// Starts from `num_seeds` farthest-point seeds (default
/// [`default_seed_count`]); while some point is uncovered, the lowest-index
/// uncovered point becomes an extra seed. Patches with identical point sets
/// are kept once.
pub fn extract_covering_patches(cloud: &PointCloud, num_seeds: Option<usize>, patch_size: usize) -> Result<PatchSet> {
    let num_seeds = num_seeds.unwrap_or_else(|| default_seed_count(cloud.len(), patch_size));
    let mut set = extract_patches(cloud, num_seeds, patch_size)?;
    let mut covered = vec![false; cloud.len()];
    let mut distinct = HashSet::new();
    set.patches.retain(|p| {
        p.indices.iter().for_each(|&i| covered[i] = true);
        let mut key = p.indices.clone();
        key.sort_unstable();
        distinct.insert(key)
    });
    while let Some(u) = covered.iter().position(|&c| !c) {
        let nbrs = knn_indices(cloud.points(), &[cloud.points()[u]], patch_size)?;
        let mut indices = nbrs.row(0).to_vec();
        if !indices.contains(&u) {
            // More than `patch_size` points coincide with `u`; all are at distance 0.
            *indices.last_mut().expect("patch_size >= 1") = u;
        }
        indices.iter().for_each(|&i| covered[i] = true);
        set.patches.push(make_patch(cloud, u, indices)?);
    }
    Ok(set)
}

/// Training patches for a set of analytic shapes: per shape, a dense cloud of
/// `points_per_shape` samples split into `patches_per_shape` patches of
/// `patch_size` points.
pub fn toy_corpus(
    surfaces: &[AnalyticSurface],
    points_per_shape: usize,
    patches_per_shape: usize,
    patch_size: usize,
    seed: u64,
) -> Result<PatchSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = PatchSet::default();
    for s in surfaces {
        let cloud = generate_shape(s, points_per_shape, &mut rng)?;
        corpus.extend(extract_patches(&cloud, patches_per_shape, patch_size)?);
    }
    Ok(corpus)
}
