//! Area-uniform sampling of analytic surfaces, and the built-in toy corpus.

use std::f64::consts::TAU;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{AnalyticSurface, Point, PointCloud};

/// Draws `n` points uniformly by area from `surface`.
pub fn generate_shape<R: Rng + ?Sized>(surface: &AnalyticSurface, n: usize, rng: &mut R) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::arg("generate_shape needs n >= 1"));
    }
    let surface = surface.validated()?;
    let points = (0..n).map(|_| sample_point(&surface, rng)).collect();
    PointCloud::new(points)
}

fn sample_point<R: Rng + ?Sized>(surface: &AnalyticSurface, rng: &mut R) -> Point {
    match *surface {
        AnalyticSurface::Sphere { radius } => {
            // Uniform height on the axis gives uniform area on the sphere.
            let z: f64 = rng.random_range(-1.0..=1.0);
            let phi = rng.random_range(0.0..TAU);
            let rho = (1.0 - z * z).max(0.0).sqrt();
            [radius * rho * phi.cos(), radius * rho * phi.sin(), radius * z]
        }
        AnalyticSurface::Plane { half_x, half_y } => [
            rng.random_range(-half_x..=half_x),
            rng.random_range(-half_y..=half_y),
            0.0,
        ],
        AnalyticSurface::Torus { major, minor } => {
            let u = rng.random_range(0.0..TAU);
            // The area element grows with the distance from the axis.
            let v = loop {
                let v = rng.random_range(0.0..TAU);
                let accept = (major + minor * v.cos()) / (major + minor);
                if rng.random::<f64>() < accept {
                    break v;
                }
            };
            let ring = major + minor * v.cos();
            [ring * u.cos(), ring * u.sin(), minor * v.sin()]
        }
        AnalyticSurface::Box { half } => {
            let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            let mut axis = 2;
            for (a, &area) in areas.iter().enumerate() {
                if pick < area {
                    axis = a;
                    break;
                }
                pick -= area;
            }
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let mut p = [0.0; 3];
            for (d, c) in p.iter_mut().enumerate() {
                *c = if d == axis {
                    sign * half[d]
                } else {
                    rng.random_range(-half[d]..=half[d])
                };
            }
            p
        }
    }
}

/// Surfaces of the built-in toy corpus, by name: `sphere`, `torus`, `box`,
/// `plane`, plus held-out variants `ellipsoid_box`, `thin_torus`,
/// `small_sphere`.
pub fn toy_surface(name: &str) -> Result<AnalyticSurface> {
    match name {
        "sphere" => AnalyticSurface::sphere(1.0),
        "torus" => AnalyticSurface::torus(1.0, 0.4),
        "box" | "cube" => AnalyticSurface::cuboid([1.0, 1.0, 1.0]),
        "plane" => AnalyticSurface::plane(1.0, 1.0),
        "small_sphere" => AnalyticSurface::sphere(0.6),
        "thin_torus" => AnalyticSurface::torus(1.2, 0.25),
        "flat_box" => AnalyticSurface::cuboid([1.2, 0.8, 0.4]),
        other => Err(Error::arg(format!(
            "unknown toy shape {other:?} (known: sphere, torus, box, plane, small_sphere, thin_torus, flat_box)"
        ))),
    }
}

/// Parses `toy://name[,name...]`; `toy://all` is sphere, torus and box.
pub fn parse_toy_uri(uri: &str) -> Result<Vec<(String, AnalyticSurface)>> {
    let rest = uri
        .strip_prefix("toy://")
        .ok_or_else(|| Error::arg(format!("{uri:?} is not a toy:// dataset")))?;
    let names: Vec<&str> = match rest {
        "all" => vec!["sphere", "torus", "box"],
        _ => rest.split(',').map(str::trim).filter(|s| !s.is_empty()).collect(),
    };
    if names.is_empty() {
        return Err(Error::arg(format!("{uri:?} names no shapes")));
    }
    names.into_iter().map(|n| Ok((n.to_string(), toy_surface(n)?))).collect()
}
