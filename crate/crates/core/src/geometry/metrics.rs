use super::{dist2, nearest_indices, Point};
use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Tape, Tensor, Var};

fn check_nonempty(p: &[Point], q: &[Point], op: &'static str) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyInput(op));
    }
    Ok(())
}

/// The two directed Chamfer terms: mean over `p` of the squared distance to
/// the nearest `q`, and the same from `q` to `p`.
pub fn chamfer_terms(p: &[Point], q: &[Point]) -> Result<(f64, f64)> {
    check_nonempty(p, q, "chamfer_distance")?;
    let p_to_q = nearest_indices(q, p)?;
    let q_to_p = nearest_indices(p, q)?;
    let fwd: f64 = p.iter().zip(&p_to_q).map(|(a, &j)| dist2(a, &q[j])).sum();
    let bwd: f64 = q.iter().zip(&q_to_p).map(|(b, &i)| dist2(&p[i], b)).sum();
    Ok((fwd / p.len() as f64, bwd / q.len() as f64))
}

/// Symmetric Chamfer distance on squared Euclidean distances, averaged over
/// each set.
pub fn chamfer_distance(p: &[Point], q: &[Point]) -> Result<f64> {
    let (a, b) = chamfer_terms(p, q)?;
    Ok(a + b)
}

/// Symmetric Hausdorff distance on (non-squared) Euclidean distances.
pub fn hausdorff_distance(p: &[Point], q: &[Point]) -> Result<f64> {
    check_nonempty(p, q, "hausdorff_distance")?;
    let p_to_q = nearest_indices(q, p)?;
    let q_to_p = nearest_indices(p, q)?;
    let a = p.iter().zip(&p_to_q).map(|(x, &j)| dist2(x, &q[j])).fold(0.0, f64::max);
    let b = q.iter().zip(&q_to_p).map(|(y, &i)| dist2(&p[i], y)).fold(0.0, f64::max);
    Ok(a.max(b).sqrt())
}

struct ChamferBackward {
    target: Vec<Point>,
    pred_to_target: Vec<usize>,
    target_to_pred: Vec<usize>,
}

impl CustomOp for ChamferBackward {
    fn name(&self) -> &'static str {
        "chamfer_distance"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let pred = inputs[0].data();
        let g = grad_output[0];
        let np = self.pred_to_target.len() as f64;
        let nq = self.target.len() as f64;
        let mut dp = vec![0.0; pred.len()];
        for (i, &j) in self.pred_to_target.iter().enumerate() {
            for d in 0..3 {
                dp[i * 3 + d] += g * 2.0 * (pred[i * 3 + d] - self.target[j][d]) / np;
            }
        }
        for (j, &i) in self.target_to_pred.iter().enumerate() {
            for d in 0..3 {
                dp[i * 3 + d] += g * 2.0 * (pred[i * 3 + d] - self.target[j][d]) / nq;
            }
        }
        vec![Some(dp)]
    }
}

/// Chamfer distance between an `[M, 3]` tape value and a fixed target set.
///
/// Differentiable in the predicted coordinates with the nearest-neighbor
/// assignment held at its forward-pass value.
pub fn chamfer_loss(tape: &mut Tape, pred: Var, target: &[Point]) -> Result<Var> {
    let pts = tape.value(pred).to_points()?;
    check_nonempty(&pts, target, "chamfer_distance")?;
    let pred_to_target = nearest_indices(target, &pts)?;
    let target_to_pred = nearest_indices(&pts, target)?;
    let fwd: f64 = pts.iter().zip(&pred_to_target).map(|(a, &j)| dist2(a, &target[j])).sum();
    let bwd: f64 = target.iter().zip(&target_to_pred).map(|(b, &i)| dist2(&pts[i], b)).sum();
    let value = fwd / pts.len() as f64 + bwd / target.len() as f64;
    let op = ChamferBackward {
        target: target.to_vec(),
        pred_to_target,
        target_to_pred,
    };
    Ok(tape.custom(&[pred], Tensor::scalar(value), Box::new(op)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
    }

    fn cd_oracle(p: &[Point], q: &[Point]) -> f64 {
        let mut a = 0.0;
        for x in p {
            a += q.iter().map(|y| dist2(x, y)).fold(f64::INFINITY, f64::min);
        }
        let mut b = 0.0;
        for y in q {
            b += p.iter().map(|x| dist2(x, y)).fold(f64::INFINITY, f64::min);
        }
        a / p.len() as f64 + b / q.len() as f64
    }

    #[test]
    fn hand_evaluated_cases() {
        let p = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let q = [[0.0, 0.0, 0.0]];
        assert_eq!(chamfer_distance(&p, &q).unwrap(), 0.5);
        assert_eq!(hausdorff_distance(&p, &q).unwrap(), 1.0);
        assert_eq!(chamfer_distance(&p, &p).unwrap(), 0.0);
        assert_eq!(hausdorff_distance(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let p = [[0.0; 3]];
        assert!(chamfer_distance(&p, &[]).is_err());
        assert!(hausdorff_distance(&[], &p).is_err());
    }

    #[test]
    fn matches_double_loop_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let (np, nq) = (rng.random_range(1..60), rng.random_range(1..60));
            let p = cloud(&mut rng, np);
            let q = cloud(&mut rng, nq);
            let cd = chamfer_distance(&p, &q).unwrap();
            assert!((cd - cd_oracle(&p, &q)).abs() < 1e-12);
            assert!((cd - chamfer_distance(&q, &p).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_value_matches_plain_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = cloud(&mut rng, 30);
        let q = cloud(&mut rng, 45);
        let mut tape = Tape::new();
        let v = tape.param(Tensor::from_points(&p));
        let l = chamfer_loss(&mut tape, v, &q).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), chamfer_distance(&p, &q).unwrap());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = cloud(&mut rng, 12);
        let q = cloud(&mut rng, 17);
        let mut tape = Tape::new();
        let v = tape.param(Tensor::from_points(&p));
        let l = chamfer_loss(&mut tape, v, &q).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(v).unwrap().to_vec();
        let h = 1e-6;
        for i in 0..p.len() {
            for d in 0..3 {
                let mut plus = p.clone();
                plus[i][d] += h;
                let mut minus = p.clone();
                minus[i][d] -= h;
                let fd = (cd_oracle(&plus, &q) - cd_oracle(&minus, &q)) / (2.0 * h);
                assert!((fd - g[i * 3 + d]).abs() < 1e-7, "{fd} vs {}", g[i * 3 + d]);
            }
        }
    }
}
