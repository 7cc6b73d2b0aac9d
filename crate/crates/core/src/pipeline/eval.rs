use crate::error::{Error, Result};
use crate::geometry::{chamfer_distance, hausdorff_distance, normalize_to_unit_sphere, point_to_surface, PointCloud, Surface};

/// Raw metric values (not scaled by 10^3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub cd: f64,
    pub hd: f64,
    pub p2f: Option<f64>,
}

/// Compares `pred` with `gt` after mapping both through the transform that
/// takes `gt` to the unit sphere. P2F is measured against `surface` in model
/// units and divided by the same scale.
pub fn evaluate(pred: &PointCloud, gt: &PointCloud, surface: Option<&dyn Surface>) -> Result<Metrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyInput("evaluate"));
    }
    let (gt_n, n) = normalize_to_unit_sphere(gt)?;
    let pred_n = pred.transformed(&n);
    let p2f = match surface {
        Some(s) => Some(point_to_surface(pred.points(), s)? / n.scale),
        None => None,
    };
    Ok(Metrics {
        cd: chamfer_distance(pred_n.points(), gt_n.points())?,
        hd: hausdorff_distance(pred_n.points(), gt_n.points())?,
        p2f,
    })
}
