//! Point sets and the non-learned geometric kernels: neighbor search,
//! farthest point sampling, set distances, and surface distances.

mod kdtree;
mod knn;
mod metrics;
mod sampling;
mod surface;

pub use kdtree::KdTree;
pub use knn::{knn_brute_force, knn_indices, nearest_indices, Neighbors, BRUTE_FORCE_LIMIT};
pub use metrics::{chamfer_distance, chamfer_loss, chamfer_terms, hausdorff_distance};
pub use sampling::farthest_point_sample;
pub use surface::{point_to_surface, AnalyticSurface, Surface, TriangleMesh};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Point = [f64; 3];

/// Squared Euclidean distance. Every kernel in this module goes through this
/// function so that distances (and therefore tie-breaks) agree bit-for-bit.
#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Similarity transform taking a cloud to the unit sphere: `(p - centroid) / scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub centroid: Point,
    pub scale: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        centroid: [0.0; 3],
        scale: 1.0,
    };

    pub fn apply(&self, p: &Point) -> Point {
        [
            (p[0] - self.centroid[0]) / self.scale,
            (p[1] - self.centroid[1]) / self.scale,
            (p[2] - self.centroid[2]) / self.scale,
        ]
    }

    pub fn invert(&self, p: &Point) -> Point {
        [
            p[0] * self.scale + self.centroid[0],
            p[1] * self.scale + self.centroid[1],
            p[2] * self.scale + self.centroid[2],
        ]
    }
}

/// Ordered 3D points with an optional record of how they were normalized.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point>,
    normalization: Option<Normalization>,
}

impl PointCloud {
    /// Rejects non-finite coordinates.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::arg(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            normalization: None,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(t.to_points()?)
    }

    pub fn with_normalization(mut self, n: Normalization) -> Self {
        self.normalization = Some(n);
        self
    }

    pub fn normalization(&self) -> Option<Normalization> {
        self.normalization
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_points(&self.points)
    }

    pub fn centroid(&self) -> Point {
        centroid(&self.points)
    }

    /// Applies `n` to every point (no record is attached).
    pub fn transformed(&self, n: &Normalization) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| n.apply(p)).collect(),
            normalization: None,
        }
    }

    /// Inverts the attached normalization; clouds without one are returned unchanged.
    pub fn denormalized(&self) -> PointCloud {
        match &self.normalization {
            Some(n) => PointCloud {
                points: self.points.iter().map(|p| n.invert(p)).collect(),
                normalization: None,
            },
            None => self.clone(),
        }
    }
}

pub fn centroid(points: &[Point]) -> Point {
    let mut c = [0.0; 3];
    for p in points {
        c[0] += p[0];
        c[1] += p[1];
        c[2] += p[2];
    }
    let n = points.len().max(1) as f64;
    [c[0] / n, c[1] / n, c[2] / n]
}

/// Centers the cloud at its centroid and scales the farthest point to norm 1.
/// When every point coincides the scale is 1.
pub fn normalize_to_unit_sphere(cloud: &PointCloud) -> Result<(PointCloud, Normalization)> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("normalize_to_unit_sphere"));
    }
    let c = cloud.centroid();
    let radius = cloud
        .points()
        .iter()
        .map(|p| norm(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]))
        .fold(0.0, f64::max);
    let record = Normalization {
        centroid: c,
        scale: if radius > 0.0 { radius } else { 1.0 },
    };
    Ok((cloud.transformed(&record).with_normalization(record), record))
}
