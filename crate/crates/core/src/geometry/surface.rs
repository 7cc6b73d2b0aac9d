use super::{dist2, norm, Point};
use crate::error::{Error, Result};

/// Anything that can report an unsigned point-to-surface distance.
pub trait Surface {
    fn distance(&self, p: &Point) -> f64;
}

/// Closed-form surfaces centered at the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnalyticSurface {
    Sphere { radius: f64 },
    /// Rectangle in the `z = 0` plane spanning `[-half_x, half_x] x [-half_y, half_y]`.
    Plane { half_x: f64, half_y: f64 },
    /// Ring torus around the z axis.
    Torus { major: f64, minor: f64 },
    /// Boundary of the axis-aligned box `[-h, h]` per axis.
    Box { half: [f64; 3] },
}

impl AnalyticSurface {
    pub fn sphere(radius: f64) -> Result<Self> {
        Self::Sphere { radius }.validated()
    }

    pub fn plane(half_x: f64, half_y: f64) -> Result<Self> {
        Self::Plane { half_x, half_y }.validated()
    }

    pub fn torus(major: f64, minor: f64) -> Result<Self> {
        Self::Torus { major, minor }.validated()
    }

    pub fn cuboid(half: [f64; 3]) -> Result<Self> {
        Self::Box { half }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        let sizes: Vec<f64> = match self {
            Self::Sphere { radius } => vec![radius],
            Self::Plane { half_x, half_y } => vec![half_x, half_y],
            Self::Torus { major, minor } => {
                if minor >= major {
                    return Err(Error::arg("torus: minor radius must be below the major radius"));
                }
                vec![major, minor]
            }
            Self::Box { half } => half.to_vec(),
        };
        if sizes.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(self)
        } else {
            Err(Error::arg(format!("{self:?}: size parameters must be positive")))
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Sphere { .. } => "sphere",
            Self::Plane { .. } => "plane",
            Self::Torus { .. } => "torus",
            Self::Box { .. } => "box",
        }
    }

    pub fn area(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Self::Sphere { radius } => 4.0 * PI * radius * radius,
            Self::Plane { half_x, half_y } => 4.0 * half_x * half_y,
            Self::Torus { major, minor } => 4.0 * PI * PI * major * minor,
            Self::Box { half: [a, b, c] } => 8.0 * (a * b + b * c + a * c),
        }
    }
}

impl Surface for AnalyticSurface {
    fn distance(&self, p: &Point) -> f64 {
        match *self {
            Self::Sphere { radius } => (norm(p) - radius).abs(),
            Self::Plane { half_x, half_y } => {
                let dx = (p[0].abs() - half_x).max(0.0);
                let dy = (p[1].abs() - half_y).max(0.0);
                (dx * dx + dy * dy + p[2] * p[2]).sqrt()
            }
            Self::Torus { major, minor } => {
                let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - major;
                ((ring * ring + p[2] * p[2]).sqrt() - minor).abs()
            }
            Self::Box { half } => {
                let q = [p[0].abs() - half[0], p[1].abs() - half[1], p[2].abs() - half[2]];
                if q.iter().any(|&v| v > 0.0) {
                    norm(&[q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)])
                } else {
                    -q[0].max(q[1]).max(q[2])
                }
            }
        }
    }
}

/// Indexed triangle mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Point>,
    faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::arg("triangle mesh has no faces"));
        }
        for (f, face) in faces.iter().enumerate() {
            if let Some(&bad) = face.iter().find(|&&v| v >= vertices.len()) {
                return Err(Error::Index {
                    op: "triangle mesh",
                    position: f,
                    index: bad,
                    bound: vertices.len(),
                });
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn triangle(&self, f: usize) -> [Point; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }
}

impl Surface for TriangleMesh {
    fn distance(&self, p: &Point) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                dist2(p, &closest_point_on_triangle(p, &a, &b, &c))
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }
}

fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn lerp(a: &Point, d: &Point, t: f64) -> Point {
    [a[0] + t * d[0], a[1] + t * d[1], a[2] + t * d[2]]
}

fn closest_point_on_segment(p: &Point, a: &Point, b: &Point) -> Point {
    let ab = sub(b, a);
    let len2 = dot(&ab, &ab);
    if len2 == 0.0 {
        return *a;
    }
    lerp(a, &ab, (dot(&sub(p, a), &ab) / len2).clamp(0.0, 1.0))
}

/// Exact closest point by Voronoi-region classification of `p` against the
/// triangle's vertices, edges, and face.
fn closest_point_on_triangle(p: &Point, a: &Point, b: &Point, c: &Point) -> Point {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let n = [
        ab[1] * ac[2] - ab[2] * ac[1],
        ab[2] * ac[0] - ab[0] * ac[2],
        ab[0] * ac[1] - ab[1] * ac[0],
    ];
    if dot(&n, &n) <= f64::EPSILON * dot(&ab, &ab).max(dot(&ac, &ac)).powi(2) {
        // Degenerate triangle: best of its three edges.
        return [
            closest_point_on_segment(p, a, b),
            closest_point_on_segment(p, b, c),
            closest_point_on_segment(p, c, a),
        ]
        .into_iter()
        .min_by(|x, y| dist2(p, x).total_cmp(&dist2(p, y)))
        .expect("three candidates");
    }
    let ap = sub(p, a);
    let d1 = dot(&ab, &ap);
    let d2 = dot(&ac, &ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = sub(p, b);
    let d3 = dot(&ab, &bp);
    let d4 = dot(&ac, &bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return lerp(a, &ab, d1 / (d1 - d3));
    }
    let cp = sub(p, c);
    let d5 = dot(&ab, &cp);
    let d6 = dot(&ac, &cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return lerp(a, &ac, d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let bc = sub(c, b);
        return lerp(b, &bc, (d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [
        a[0] + ab[0] * v + ac[0] * w,
        a[1] + ab[1] * v + ac[1] * w,
        a[2] + ab[2] * v + ac[2] * w,
    ]
}

/// Mean unsigned distance from `points` to `surface`.
pub fn point_to_surface(points: &[Point], surface: &dyn Surface) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyInput("point_to_surface"));
    }
    Ok(points.iter().map(|p| surface.distance(p)).sum::<f64>() / points.len() as f64)
}
