//! Central finite-difference checks of every differentiable tape operation
//! and of a complete generation stage.
//!
//! Each case reduces its output to a scalar with a fixed random projection
//! `L = sum(out * R)`, so every output element contributes. Per input tensor
//! the error is normwise, `|g_tape - g_fd| / max(|g_tape|, |g_fd|)` over the
//! checked coordinates; small tensors are checked exhaustively, large ones
//! on a seeded sample of coordinates.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{chamfer_loss, Point};
use crate::network::{ChannelPlan, NetworkParams, StageConfig, StageParams, StageVars, stage_forward};
use crate::tensor::{OpKind, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Coordinates checked per input tensor; larger tensors are subsampled.
pub const MAX_COORDS_PER_TENSOR: usize = 48;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    op: Option<OpKind>,
    inputs: Vec<(String, Tensor)>,
    build: Build,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    /// Operation the case exercises, as used by the fault hook; `None` for
    /// the composite stage.
    pub op: Option<OpKind>,
    pub worst_error: f64,
    pub worst_input: String,
    pub coords_checked: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.worst_error < GRADCHECK_TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<CaseResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases.iter().filter(|c| !c.passed()).collect()
    }

    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.worst_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<20} {:<18} {:>11} {:>7}  worst input", "case", "op", "rel_error", "status")?;
        for c in &self.cases {
            writeln!(
                f,
                "{:<20} {:<18} {:>11.3e} {:>7}  {}",
                c.name,
                c.op.map_or("composite", OpKind::name),
                c.worst_error,
                if c.passed() { "ok" } else { "FAIL" },
                c.worst_input
            )?;
        }
        Ok(())
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("matching length")
}

/// Uniform in `[-1, 1]` avoiding `|x| < margin`, so no value sits on a kink.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, -1.0, 1.0, rng);
    for v in t.data_mut() {
        while v.abs() < margin {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    t
}

fn named(items: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let mut push = |name: &'static str, op: OpKind, inputs: Vec<(&str, Tensor)>, build: Build| {
        cases.push(Case {
            name,
            op: Some(op),
            inputs: named(inputs),
            build,
        })
    };

    push(
        "linear",
        OpKind::Linear,
        vec![("x", uniform(&[5, 4], -1.0, 1.0, rng)), ("w", uniform(&[4, 3], -1.0, 1.0, rng)), ("b", uniform(&[3], -1.0, 1.0, rng))],
        Box::new(|t, v| t.linear(v[0], v[1], v[2])),
    );
    push(
        "linear_neighbors",
        OpKind::Linear,
        vec![("x", uniform(&[3, 2, 4], -1.0, 1.0, rng)), ("w", uniform(&[4, 3], -1.0, 1.0, rng)), ("b", uniform(&[3], -1.0, 1.0, rng))],
        Box::new(|t, v| t.linear(v[0], v[1], v[2])),
    );
    push(
        "relu",
        OpKind::Relu,
        vec![("x", away_from_zero(&[6, 5], 1e-3, rng))],
        Box::new(|t, v| Ok(t.relu(v[0]))),
    );
    push(
        "softmax_rows",
        OpKind::Softmax,
        vec![("x", uniform(&[4, 5], -2.0, 2.0, rng))],
        Box::new(|t, v| t.softmax_rows(v[0])),
    );
    push(
        "softmax_neighbors",
        OpKind::Softmax,
        vec![("x", uniform(&[3, 4, 2], -2.0, 2.0, rng))],
        Box::new(|t, v| t.softmax_neighbors(v[0])),
    );
    push(
        "max_pool_points",
        OpKind::MaxPool,
        vec![("x", uniform(&[6, 4], -1.0, 1.0, rng))],
        Box::new(|t, v| t.max_pool_points(v[0])),
    );
    push(
        "concat_channels",
        OpKind::Concat,
        vec![("a", uniform(&[4, 2], -1.0, 1.0, rng)), ("b", uniform(&[4, 3], -1.0, 1.0, rng))],
        Box::new(|t, v| t.concat_channels(v[0], v[1])),
    );
    push(
        "duplicate_points",
        OpKind::Duplicate,
        vec![("x", uniform(&[3, 2], -1.0, 1.0, rng))],
        Box::new(|t, v| t.duplicate_points(v[0], 3)),
    );
    push(
        "deconv1d_points",
        OpKind::Deconv,
        vec![
            ("x", uniform(&[3, 2], -1.0, 1.0, rng)),
            ("w", uniform(&[3, 2, 4], -1.0, 1.0, rng)),
            ("b", uniform(&[4], -1.0, 1.0, rng)),
        ],
        Box::new(|t, v| t.deconv1d_points(v[0], v[1], v[2], 3)),
    );
    let idx: Vec<usize> = (0..12).map(|_| rng.random_range(0..5)).collect();
    push(
        "gather_rows",
        OpKind::Gather,
        vec![("x", uniform(&[5, 3], -1.0, 1.0, rng))],
        Box::new(move |t, v| t.gather_rows(v[0], &idx, 3)),
    );
    for (name, op) in [("add", OpKind::Add), ("sub", OpKind::Sub), ("mul", OpKind::Mul)] {
        push(
            name,
            op,
            vec![("a", uniform(&[4, 3], -1.0, 1.0, rng)), ("b", uniform(&[4, 3], -1.0, 1.0, rng))],
            Box::new(move |t, v| match op {
                OpKind::Add => t.add(v[0], v[1]),
                OpKind::Sub => t.sub(v[0], v[1]),
                _ => t.mul(v[0], v[1]),
            }),
        );
    }
    push(
        "sum_neighbors",
        OpKind::SumNeighbors,
        vec![("x", uniform(&[3, 4, 2], -1.0, 1.0, rng))],
        Box::new(|t, v| t.sum_neighbors(v[0])),
    );
    push(
        "reshape",
        OpKind::Reshape,
        vec![("x", uniform(&[4, 3], -1.0, 1.0, rng))],
        Box::new(|t, v| t.reshape(v[0], &[2, 6])),
    );
    push(
        "scale",
        OpKind::Scale,
        vec![("x", uniform(&[4, 3], -1.0, 1.0, rng))],
        Box::new(|t, v| Ok(t.scale(v[0], -2.5))),
    );
    push(
        "sum",
        OpKind::Sum,
        vec![("x", uniform(&[4, 3], -1.0, 1.0, rng))],
        Box::new(|t, v| Ok(t.sum(v[0]))),
    );
    let target: Vec<Point> = (0..9).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    push(
        "chamfer_loss",
        OpKind::Custom,
        vec![("pred", uniform(&[7, 3], 0.0, 1.0, rng))],
        Box::new(move |t, v| chamfer_loss(t, v[0], &target)),
    );
    cases
}

/// A rate-2 stage with the default channel plan on 8 points, attention over
/// 4 neighbours, every layer (including the attention output) randomized.
fn stage_case(rng: &mut ChaCha8Rng) -> Case {
    let mut config = StageConfig::with_rate(2);
    config.k_attention = 4;
    let template = NetworkParams::init(ChannelPlan::default(), &[config], rng.random())
        .expect("default plan is valid")
        .stages
        .remove(0);
    let mut template = template;
    if let Some(att) = &mut template.attention {
        let bound = 1.0 / (att.output.in_width() as f64).sqrt();
        for t in [&mut att.output.weight, &mut att.output.bias] {
            *t = uniform(t.shape(), -bound, bound, rng);
        }
    }
    let mut inputs = vec![("points".to_string(), uniform(&[8, 3], -1.0, 1.0, rng))];
    inputs.extend(template.named_tensors().into_iter().map(|(n, t)| (n, t.clone())));
    let build: Build = Box::new(move |tape, vars| {
        let mut p: StageParams = template.clone();
        for (dst, v) in p.tensors_mut().into_iter().zip(&vars[1..]) {
            *dst = tape.value(*v).clone();
        }
        // Rebind the stage to the caller's leaves so gradients land on them.
        let mut sv = StageVars::register(tape, &p, false);
        rebind(&mut sv, &vars[1..]);
        stage_forward(tape, vars[0], &sv)
    });
    Case {
        name: "stage_end_to_end",
        op: None,
        inputs,
        build,
    }
}

fn rebind(sv: &mut StageVars, leaves: &[Var]) {
    let mut it = leaves.iter().copied();
    let mut next = || it.next().expect("one leaf per stage tensor");
    let mut dense = |d: &mut crate::network::DenseVars| {
        d.weight = next();
        d.bias = next();
    };
    sv.point_mlp.iter_mut().for_each(&mut dense);
    sv.fuse_mlp.iter_mut().for_each(&mut dense);
    if let Some(a) = &mut sv.attention {
        dense(&mut a.query);
        dense(&mut a.key);
        dense(&mut a.value);
        if let Some(pos) = &mut a.position {
            pos.iter_mut().for_each(&mut dense);
        }
        dense(&mut a.weight);
        dense(&mut a.output);
    }
    dense(&mut sv.expand_reduce);
    dense(&mut sv.deconv);
    sv.expand_mlp.iter_mut().for_each(&mut dense);
    sv.offset_mlp.iter_mut().for_each(&mut dense);
}

fn projected_loss(case: &Case, values: &[Tensor], projection: &Option<Tensor>, fault: Option<OpKind>, trainable: bool) -> Result<(Tape, Var, Vec<Var>, Tensor)> {
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let out_value = tape.value(out).clone();
    let r = match projection {
        Some(r) => r.clone(),
        None => Tensor::filled(out_value.shape(), 1.0),
    };
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    let loss = tape.sum(prod);
    Ok((tape, loss, vars, out_value))
}

fn run_case(case: &Case, rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<CaseResult> {
    let values: Vec<Tensor> = case.inputs.iter().map(|(_, t)| t.clone()).collect();
    let (_, _, _, out) = projected_loss(case, &values, &None, None, false)?;
    let projection = Some(uniform(out.shape(), -1.0, 1.0, rng));

    let (mut tape, loss, vars, _) = projected_loss(case, &values, &projection, fault, true)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let eval = |vals: &[Tensor]| -> Result<f64> {
        let (tape, loss, _, _) = projected_loss(case, vals, &projection, None, false)?;
        Ok(tape.value(loss).item().expect("scalar loss"))
    };

    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (i, (name, t)) in case.inputs.iter().enumerate() {
        let coords: Vec<usize> = if t.numel() <= MAX_COORDS_PER_TENSOR {
            (0..t.numel()).collect()
        } else {
            let mut c = sample(rng, t.numel(), MAX_COORDS_PER_TENSOR).into_vec();
            c.sort_unstable();
            c
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let mut vals = values.clone();
        for &j in &coords {
            let x0 = t.data()[j];
            vals[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&vals)?;
            vals[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&vals)?;
            vals[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i].data()[j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        checked += coords.len();
        let scale = a2.sqrt().max(n2.sqrt());
        let err = if scale > 1e-10 { diff2.sqrt() / scale } else { diff2.sqrt() };
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, name.clone());
        }
    }
    Ok(CaseResult {
        name: case.name,
        op: case.op,
        worst_error: worst.0,
        worst_input: worst.1,
        coords_checked: checked,
    })
}

/// Runs every case in a fixed order. `fault` makes the tape scale the
/// gradients of that operation, which the suite must catch.
pub fn run_gradcheck(seed: u64, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = op_cases(&mut rng);
    cases.push(stage_case(&mut rng));
    let mut results = Vec::with_capacity(cases.len());
    for case in &cases {
        results.push(run_case(case, &mut rng, fault)?);
    }
    Ok(GradcheckReport { cases: results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_stable() {
        let report = run_gradcheck(0, None).unwrap();
        assert!(report.passed(), "{report}");
        let names: Vec<_> = report.cases.iter().map(|c| c.name).collect();
        assert_eq!(names.first(), Some(&"linear"));
        assert_eq!(names.last(), Some(&"stage_end_to_end"));
        assert_eq!(run_gradcheck(0, None).unwrap(), report);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        for op in [OpKind::Deconv, OpKind::Gather, OpKind::Softmax, OpKind::Custom] {
            let report = run_gradcheck(1, Some(op)).unwrap();
            let failed: Vec<_> = report.failures().iter().map(|c| c.op).collect();
            assert!(failed.contains(&Some(op)), "{op:?} not caught:\n{report}");
        }
    }
}
