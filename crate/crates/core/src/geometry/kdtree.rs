use std::collections::BinaryHeap;

use super::knn::{Candidate, Neighbors};
use super::{dist2, Point};

const LEAF_SIZE: usize = 16;

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static k-d tree over a borrowed point slice.
///
/// Queries return exactly what the exhaustive scan returns: candidates are
/// ordered by (squared distance, index) and a subtree is only skipped when its
/// splitting plane is strictly farther than the current k-th candidate.
pub struct KdTree<'a> {
    points: &'a [Point],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Point]) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for d in 0..3 {
                lo[d] = lo[d].min(self.points[i][d]);
                hi[d] = hi[d].max(self.points[i][d]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] - lo[axis] <= 0.0 {
            // All points coincide.
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = points[self.order[mid]][axis];
        self.nodes.push(Node::Split {
            axis,
            value,
            left: 0,
            right: 0,
        });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        if let Node::Split { left: l, right: r, .. } = &mut self.nodes[id] {
            *l = left;
            *r = right;
        }
        id
    }

    /// `k` nearest neighbors of every query; `k` must not exceed the point count.
    pub fn knn(&self, queries: &[Point], k: usize) -> Neighbors {
        let k = k.min(self.points.len());
        let mut indices = Vec::with_capacity(queries.len() * k);
        let mut heap = BinaryHeap::with_capacity(k + 1);
        for q in queries {
            heap.clear();
            if k > 0 {
                self.search(0, q, k, &mut heap);
            }
            let mut found = std::mem::take(&mut heap).into_sorted_vec();
            indices.extend(found.iter().map(|c: &Candidate| c.idx));
            found.clear();
            heap = BinaryHeap::from(found);
        }
        Neighbors { k, indices }
    }

    fn search(&self, node: usize, q: &Point, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.order[start..end] {
                    let c = Candidate {
                        d2: dist2(q, &self.points[idx]),
                        idx,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("non-empty heap") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                let plane = diff * diff;
                if heap.len() < k || plane <= heap.peek().expect("non-empty heap").d2 {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::knn_brute_force;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn agrees_with_brute_force_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let m = rng.random_range(1..600);
            let k = rng.random_range(1..=m.min(32));
            let cloud: Vec<Point> = (0..m).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let queries: Vec<Point> = (0..50).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let tree = KdTree::build(&cloud);
            assert_eq!(
                tree.knn(&queries, k),
                knn_brute_force(&cloud, &queries, k).unwrap(),
                "trial {trial}"
            );
        }
    }

    #[test]
    fn agrees_with_brute_force_on_lattice_ties() {
        // Integer lattice: many exactly equal distances.
        let mut cloud = Vec::new();
        for x in 0..8 {
            for y in 0..8 {
                for z in 0..4 {
                    cloud.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        cloud.push([3.0, 3.0, 1.0]);
        let queries: Vec<Point> = vec![[3.5, 3.5, 1.5], [0.0, 0.0, 0.0], [3.0, 3.0, 1.0], [7.5, 0.5, 2.0]];
        let tree = KdTree::build(&cloud);
        for k in [1, 4, 9, 27] {
            assert_eq!(tree.knn(&queries, k), knn_brute_force(&cloud, &queries, k).unwrap());
        }
    }
}
