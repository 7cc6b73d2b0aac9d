use super::{dist2, Point};
use crate::error::{Error, Result};

/// Greedy farthest point sampling.
///
/// Starts from `seed_index`; every further pick maximizes the distance to the
/// nearest already-picked point, lowest index winning ties. Picks are returned
/// in selection order.
pub fn farthest_point_sample(points: &[Point], m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 {
        return Err(Error::arg("farthest_point_sample: m must be at least 1"));
    }
    if m > n {
        return Err(Error::arg(format!(
            "farthest_point_sample: cannot pick {m} of {n} points"
        )));
    }
    if seed_index >= n {
        return Err(Error::arg(format!(
            "farthest_point_sample: seed index {seed_index} out of range for {n} points"
        )));
    }
    let mut picked = Vec::with_capacity(m);
    let mut chosen = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = seed_index;
    loop {
        picked.push(current);
        chosen[current] = true;
        if picked.len() == m {
            return Ok(picked);
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            let d = dist2(&c, p);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        current = best;
    }
}
