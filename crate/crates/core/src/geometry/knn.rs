use std::cmp::Ordering;

use super::{dist2, KdTree, Point};
use crate::error::{Error, Result};

/// Clouds up to this size are searched exhaustively; larger ones go through
/// a [`KdTree`]. Both paths return identical tables, ties included.
pub const BRUTE_FORCE_LIMIT: usize = 256;

/// Neighbor table: row `q` holds the `k` nearest cloud indices of query `q`,
/// nearest first, ties broken by lower index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighbors {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl Neighbors {
    pub fn row(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn rows(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }
}

/// Lexicographic (distance, index) key used by every neighbor search.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Candidate {
    pub d2: f64,
    pub idx: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.idx.cmp(&other.idx))
    }
}

fn check_k(cloud: &[Point], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::arg("knn: k must be at least 1"));
    }
    if k > cloud.len() {
        return Err(Error::arg(format!(
            "knn: k = {k} exceeds the cloud size {}",
            cloud.len()
        )));
    }
    Ok(())
}

/// Exact k-nearest neighbors, choosing the exhaustive or tree path by size.
pub fn knn_indices(cloud: &[Point], queries: &[Point], k: usize) -> Result<Neighbors> {
    check_k(cloud, k)?;
    if cloud.len() <= BRUTE_FORCE_LIMIT {
        knn_brute_force(cloud, queries, k)
    } else {
        Ok(KdTree::build(cloud).knn(queries, k))
    }
}

/// Exhaustive scan over every cloud point for every query.
pub fn knn_brute_force(cloud: &[Point], queries: &[Point], k: usize) -> Result<Neighbors> {
    check_k(cloud, k)?;
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut scratch: Vec<Candidate> = Vec::with_capacity(cloud.len());
    for q in queries {
        scratch.clear();
        scratch.extend(cloud.iter().enumerate().map(|(idx, p)| Candidate { d2: dist2(q, p), idx }));
        if k < scratch.len() {
            scratch.select_nth_unstable(k - 1);
            scratch.truncate(k);
        }
        scratch.sort_unstable();
        indices.extend(scratch.iter().map(|c| c.idx));
    }
    Ok(Neighbors { k, indices })
}

/// Index of the nearest cloud point for each query (lowest index on ties).
pub fn nearest_indices(cloud: &[Point], queries: &[Point]) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("nearest_indices"));
    }
    if cloud.len() > BRUTE_FORCE_LIMIT {
        return Ok(KdTree::build(cloud).knn(queries, 1).indices);
    }
    Ok(queries
        .iter()
        .map(|q| {
            let mut best = 0;
            let mut best_d2 = dist2(q, &cloud[0]);
            for (i, p) in cloud.iter().enumerate().skip(1) {
                let d = dist2(q, p);
                if d < best_d2 {
                    best_d2 = d;
                    best = i;
                }
            }
            best
        })
        .collect())
}
