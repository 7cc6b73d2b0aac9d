use super::config::StageConfig;
use super::params::{Dense, NetworkParams, StageParams};
use crate::error::{Error, Result};
use crate::geometry::knn_indices;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl DenseVars {
    fn register(tape: &mut Tape, d: &Dense, trainable: bool) -> Self {
        Self {
            weight: tape.leaf(d.weight.clone(), trainable),
            bias: tape.leaf(d.bias.clone(), trainable),
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }

    fn apply_relu(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.apply(tape, x)?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub query: DenseVars,
    pub key: DenseVars,
    pub value: DenseVars,
    pub position: Option<[DenseVars; 2]>,
    pub weight: DenseVars,
    pub output: DenseVars,
}

/// Tape handles for one stage's parameters, mirroring [`StageParams`].
#[derive(Clone, Debug)]
pub struct StageVars {
    pub config: StageConfig,
    pub point_mlp: [DenseVars; 2],
    pub fuse_mlp: [DenseVars; 2],
    pub attention: Option<AttentionVars>,
    pub expand_reduce: DenseVars,
    pub deconv: DenseVars,
    pub expand_mlp: [DenseVars; 2],
    pub offset_mlp: [DenseVars; 2],
}

impl StageVars {
    /// Records every parameter as a leaf; `trainable` sets `requires_grad`.
    pub fn register(tape: &mut Tape, p: &StageParams, trainable: bool) -> Self {
        let mut d = |x: &Dense| DenseVars::register(tape, x, trainable);
        let point_mlp = [d(&p.point_mlp[0]), d(&p.point_mlp[1])];
        let fuse_mlp = [d(&p.fuse_mlp[0]), d(&p.fuse_mlp[1])];
        let attention = p.attention.as_ref().map(|a| AttentionVars {
            query: d(&a.query),
            key: d(&a.key),
            value: d(&a.value),
            position: a.position.as_ref().map(|pos| [d(&pos[0]), d(&pos[1])]),
            weight: d(&a.weight),
            output: d(&a.output),
        });
        let expand_reduce = d(&p.expand_reduce);
        let deconv = DenseVars {
            weight: tape.leaf(p.deconv.weight.clone(), trainable),
            bias: tape.leaf(p.deconv.bias.clone(), trainable),
        };
        let mut d = |x: &Dense| DenseVars::register(tape, x, trainable);
        let expand_mlp = [d(&p.expand_mlp[0]), d(&p.expand_mlp[1])];
        let offset_mlp = [d(&p.offset_mlp[0]), d(&p.offset_mlp[1])];
        Self {
            config: p.config,
            point_mlp,
            fuse_mlp,
            attention,
            expand_reduce,
            deconv,
            expand_mlp,
            offset_mlp,
        }
    }

    /// Handles in the order of [`StageParams::named_tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let mut dense = |d: &DenseVars| {
            out.push(d.weight);
            out.push(d.bias);
        };
        self.point_mlp.iter().for_each(&mut dense);
        self.fuse_mlp.iter().for_each(&mut dense);
        if let Some(a) = &self.attention {
            dense(&a.query);
            dense(&a.key);
            dense(&a.value);
            if let Some(pos) = &a.position {
                pos.iter().for_each(&mut dense);
            }
            dense(&a.weight);
            dense(&a.output);
        }
        dense(&self.expand_reduce);
        dense(&self.deconv);
        self.expand_mlp.iter().for_each(&mut dense);
        self.offset_mlp.iter().for_each(&mut dense);
        out
    }
}

#[derive(Clone, Debug)]
pub struct NetworkVars {
    pub stages: Vec<StageVars>,
}

impl NetworkVars {
    pub fn register(tape: &mut Tape, params: &NetworkParams, trainable: bool) -> Self {
        Self {
            stages: params
                .stages
                .iter()
                .map(|s| StageVars::register(tape, s, trainable))
                .collect(),
        }
    }

    pub fn all(&self) -> Vec<Var> {
        self.stages.iter().flat_map(StageVars::all).collect()
    }
}

fn point_count(tape: &Tape, points: Var) -> Result<usize> {
    match tape.shape(points) {
        [n, 3] => Ok(*n),
        other => Err(Error::Dimension {
            op: "stage input",
            lhs: other.to_vec(),
            rhs: vec![0, 3],
        }),
    }
}

/// `[N, 3]` coordinates to `[N, F]` features: point MLPs, max-pooled global
/// context concatenated back onto every point, a fusing MLP, then (for the
/// transformer extractor) residual local vector attention.
pub fn extract_features(tape: &mut Tape, points: Var, vars: &StageVars) -> Result<Var> {
    let n = point_count(tape, points)?;
    let config = vars.config;
    if config.uses_attention() && n < config.k_attention {
        return Err(Error::arg(format!(
            "feature extraction needs at least k_attention = {} points, got {n}",
            config.k_attention
        )));
    }
    let h = vars.point_mlp[0].apply_relu(tape, points)?;
    let h = vars.point_mlp[1].apply_relu(tape, h)?;
    let width = tape.shape(h)[1];
    let pooled = tape.max_pool_points(h)?;
    let pooled = tape.reshape(pooled, &[1, width])?;
    let global = tape.duplicate_points(pooled, n)?;
    let fused = tape.concat_channels(h, global)?;
    let x = vars.fuse_mlp[0].apply_relu(tape, fused)?;
    let x = vars.fuse_mlp[1].apply_relu(tape, x)?;
    match &vars.attention {
        Some(att) => local_attention(tape, x, points, att, config),
        None => Ok(x),
    }
}

/// `f_i = x_i + W_out * sum_j softmax_j(gamma(q_i - k_j + d_ij)) * (v_j + d_ij)`
/// over the `k` coordinate-space neighbors `j` of point `i`, where `d_ij`
/// encodes `p_i - p_j` and the softmax runs per channel.
fn local_attention(tape: &mut Tape, x: Var, points: Var, att: &AttentionVars, config: StageConfig) -> Result<Var> {
    let k = config.k_attention;
    let coords = tape.value(points).to_points()?;
    let n = coords.len();
    let neighbors = knn_indices(&coords, &coords, k)?;
    let idx = &neighbors.indices;

    let q = att.query.apply(tape, x)?;
    let key = att.key.apply(tape, x)?;
    let value = att.value.apply(tape, x)?;
    let width = tape.shape(q)[1];

    let q_rep = tape.duplicate_points(q, k)?;
    let q_rep = tape.reshape(q_rep, &[n, k, width])?;
    let k_nb = tape.gather_rows(key, idx, k)?;
    let mut v_nb = tape.gather_rows(value, idx, k)?;
    let mut rel = tape.sub(q_rep, k_nb)?;

    if let Some(pos) = &att.position {
        let p_rep = tape.duplicate_points(points, k)?;
        let p_rep = tape.reshape(p_rep, &[n, k, 3])?;
        let p_nb = tape.gather_rows(points, idx, k)?;
        let offsets = tape.sub(p_rep, p_nb)?;
        let h = pos[0].apply_relu(tape, offsets)?;
        let enc = pos[1].apply(tape, h)?;
        rel = tape.add(rel, enc)?;
        v_nb = tape.add(v_nb, enc)?;
    }

    let rel = tape.relu(rel);
    let logits = att.weight.apply(tape, rel)?;
    let weights = tape.softmax_neighbors(logits)?;
    let weighted = tape.mul(weights, v_nb)?;
    let aggregated = tape.sum_neighbors(weighted)?;
    let projected = att.output.apply(tape, aggregated)?;
    tape.add(x, projected)
}

/// `[N, F]` to `[rN, F]`: MLP over the concatenation of interleaved
/// duplicates and a learned transposed-convolution branch.
pub fn expand_features(tape: &mut Tape, features: Var, vars: &StageVars) -> Result<Var> {
    let r = vars.config.rate;
    let dup = tape.duplicate_points(features, r)?;
    let reduced = vars.expand_reduce.apply_relu(tape, features)?;
    let learned = tape.deconv1d_points(reduced, vars.deconv.weight, vars.deconv.bias, r)?;
    let learned = tape.relu(learned);
    let both = tape.concat_channels(dup, learned)?;
    let e = vars.expand_mlp[0].apply_relu(tape, both)?;
    vars.expand_mlp[1].apply_relu(tape, e)
}

/// Offsets from expanded features, added to the `r`-fold duplicated input
/// (or used directly as coordinates when residual learning is off).
pub fn reconstruct_coordinates(tape: &mut Tape, expanded: Var, points: Var, vars: &StageVars) -> Result<Var> {
    let r = vars.config.rate;
    let n = point_count(tape, points)?;
    let rows = tape.shape(expanded)[0];
    if rows != r * n {
        return Err(Error::Dimension {
            op: "reconstruct_coordinates",
            lhs: tape.shape(expanded).to_vec(),
            rhs: vec![r * n, 3],
        });
    }
    let h = vars.offset_mlp[0].apply_relu(tape, expanded)?;
    let offsets = vars.offset_mlp[1].apply(tape, h)?;
    if !vars.config.use_residual {
        return Ok(offsets);
    }
    let base = tape.duplicate_points(points, r)?;
    tape.add(offsets, base)
}

/// One generation stage: `[N, 3]` to `[rN, 3]`.
pub fn stage_forward(tape: &mut Tape, points: Var, vars: &StageVars) -> Result<Var> {
    let features = extract_features(tape, points, vars)?;
    let expanded = expand_features(tape, features, vars)?;
    reconstruct_coordinates(tape, expanded, points, vars)
}

/// Outputs of every stage of a cascade, first to last.
#[derive(Clone, Debug)]
pub struct CascadeOutputs {
    pub stages: Vec<Var>,
}

impl CascadeOutputs {
    pub fn last(&self) -> Var {
        *self.stages.last().expect("cascade has at least one stage")
    }

    /// `(P1, P2, P2_refined)` of the standard three-stage cascade.
    pub fn triple(&self) -> Option<(Var, Var, Var)> {
        match self.stages.as_slice() {
            [a, b, c] => Some((*a, *b, *c)),
            _ => None,
        }
    }
}

/// Runs the stages in sequence, each on the previous stage's output.
pub fn cascade_forward(tape: &mut Tape, points: Var, vars: &[StageVars]) -> Result<CascadeOutputs> {
    let mut current = points;
    let mut stages = Vec::with_capacity(vars.len());
    for v in vars {
        current = stage_forward(tape, current, v)?;
        stages.push(current);
    }
    Ok(CascadeOutputs { stages })
}

impl NetworkParams {
    /// Inference without gradients: every stage output as point lists.
    pub fn forward_points(&self, points: &[[f64; 3]], use_refiner: bool) -> Result<Vec<Vec<[f64; 3]>>> {
        let stages = self.inference_stages(use_refiner);
        let mut tape = Tape::new();
        let vars: Vec<StageVars> = stages.iter().map(|s| StageVars::register(&mut tape, s, false)).collect();
        let input = tape.constant(crate::tensor::Tensor::from_points(points));
        let out = cascade_forward(&mut tape, input, &vars)?;
        out.stages.iter().map(|v| tape.value(*v).to_points()).collect()
    }
}
