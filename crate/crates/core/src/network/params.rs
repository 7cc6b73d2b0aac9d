use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ChannelPlan, StageConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weight `[in, out]` and bias `[out]` of one per-point affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cin, cout]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weight and bias.
    fn init(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut d = Self::zeros(cin, cout);
        fill_uniform(&mut d.weight, cin, rng);
        fill_uniform(&mut d.bias, cin, rng);
        d
    }

    pub fn in_width(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn out_width(&self) -> usize {
        self.weight.dim(1)
    }
}

/// Transposed point convolution: kernel `[r, in, out]`, bias `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeconvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Local vector-attention layer. `position` is absent when the stage runs
/// without relative position encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub position: Option<[Dense; 2]>,
    pub weight: Dense,
    pub output: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    pub config: StageConfig,
    pub point_mlp: [Dense; 2],
    pub fuse_mlp: [Dense; 2],
    pub attention: Option<AttentionParams>,
    pub expand_reduce: Dense,
    pub deconv: DeconvParams,
    pub expand_mlp: [Dense; 2],
    pub offset_mlp: [Dense; 2],
}

fn fill_uniform(t: &mut Tensor, fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
}

impl StageParams {
    /// Allocates every tensor of the stage, all zero.
    pub fn zeros(plan: &ChannelPlan, config: StageConfig) -> Result<Self> {
        Self::build(plan, config, None)
    }

    /// Fan-in scaled uniform initialization; the attention output projection
    /// starts at zero so the attention layer begins as the identity.
    pub fn init(plan: &ChannelPlan, config: StageConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::build(plan, config, Some(rng))
    }

    fn build(plan: &ChannelPlan, config: StageConfig, mut rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        plan.validate()?;
        config.validate()?;
        let mut dense = |cin: usize, cout: usize| match rng.as_deref_mut() {
            Some(r) => Dense::init(cin, cout, r),
            None => Dense::zeros(cin, cout),
        };
        let f = plan.feature_width();
        let a = plan.attention;
        let point_mlp = [dense(3, plan.point_mlp[0]), dense(plan.point_mlp[0], plan.point_mlp[1])];
        let fuse_mlp = [
            dense(2 * plan.point_mlp[1], plan.fuse_mlp[0]),
            dense(plan.fuse_mlp[0], plan.fuse_mlp[1]),
        ];
        let attention = if config.uses_attention() {
            let query = dense(f, a);
            let key = dense(f, a);
            let value = dense(f, a);
            let position = config.use_position_encoding.then(|| [dense(3, a), dense(a, a)]);
            let weight = dense(a, a);
            Some(AttentionParams {
                query,
                key,
                value,
                position,
                weight,
                output: Dense::zeros(a, f),
            })
        } else {
            None
        };
        let expand_reduce = dense(f, plan.expand_reduce);
        let mut deconv = DeconvParams {
            weight: Tensor::zeros(&[config.rate, plan.expand_reduce, f]),
            bias: Tensor::zeros(&[f]),
        };
        if let Some(r) = rng.as_deref_mut() {
            fill_uniform(&mut deconv.weight, plan.expand_reduce, r);
            fill_uniform(&mut deconv.bias, plan.expand_reduce, r);
        }
        let mut dense = |cin: usize, cout: usize| match rng.as_deref_mut() {
            Some(r) => Dense::init(cin, cout, r),
            None => Dense::zeros(cin, cout),
        };
        let expand_mlp = [dense(2 * f, plan.expand_mlp[0]), dense(plan.expand_mlp[0], plan.expand_mlp[1])];
        let offset_mlp = [dense(plan.expand_mlp[1], plan.offset_hidden), dense(plan.offset_hidden, 3)];
        Ok(Self {
            config,
            point_mlp,
            fuse_mlp,
            attention,
            expand_reduce,
            deconv,
            expand_mlp,
            offset_mlp,
        })
    }

    /// Every learnable tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        fn dense<'a>(name: &str, d: &'a Dense, out: &mut Vec<(String, &'a Tensor)>) {
            out.push((format!("{name}.weight"), &d.weight));
            out.push((format!("{name}.bias"), &d.bias));
        }
        dense("point_mlp.0", &self.point_mlp[0], &mut out);
        dense("point_mlp.1", &self.point_mlp[1], &mut out);
        dense("fuse_mlp.0", &self.fuse_mlp[0], &mut out);
        dense("fuse_mlp.1", &self.fuse_mlp[1], &mut out);
        if let Some(att) = &self.attention {
            dense("attention.query", &att.query, &mut out);
            dense("attention.key", &att.key, &mut out);
            dense("attention.value", &att.value, &mut out);
            if let Some(pos) = &att.position {
                dense("attention.position.0", &pos[0], &mut out);
                dense("attention.position.1", &pos[1], &mut out);
            }
            dense("attention.weight", &att.weight, &mut out);
            dense("attention.output", &att.output, &mut out);
        }
        dense("expand_reduce", &self.expand_reduce, &mut out);
        out.push(("deconv.weight".into(), &self.deconv.weight));
        out.push(("deconv.bias".into(), &self.deconv.bias));
        dense("expand_mlp.0", &self.expand_mlp[0], &mut out);
        dense("expand_mlp.1", &self.expand_mlp[1], &mut out);
        dense("offset_mlp.0", &self.offset_mlp[0], &mut out);
        dense("offset_mlp.1", &self.offset_mlp[1], &mut out);
        out
    }

    /// Mutable view in the same order as [`StageParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        fn dense<'a>(d: &'a mut Dense, out: &mut Vec<&'a mut Tensor>) {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        let [p0, p1] = &mut self.point_mlp;
        dense(p0, &mut out);
        dense(p1, &mut out);
        let [f0, f1] = &mut self.fuse_mlp;
        dense(f0, &mut out);
        dense(f1, &mut out);
        if let Some(att) = &mut self.attention {
            dense(&mut att.query, &mut out);
            dense(&mut att.key, &mut out);
            dense(&mut att.value, &mut out);
            if let Some([q0, q1]) = &mut att.position {
                dense(q0, &mut out);
                dense(q1, &mut out);
            }
            dense(&mut att.weight, &mut out);
            dense(&mut att.output, &mut out);
        }
        dense(&mut self.expand_reduce, &mut out);
        out.push(&mut self.deconv.weight);
        out.push(&mut self.deconv.bias);
        let [e0, e1] = &mut self.expand_mlp;
        dense(e0, &mut out);
        dense(e1, &mut out);
        let [o0, o1] = &mut self.offset_mlp;
        dense(o0, &mut out);
        dense(o1, &mut out);
        out
    }

    pub fn count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Zeros the final offset layer so the stage outputs its duplicated input.
    pub fn zero_offset_head(&mut self) {
        let head = &mut self.offset_mlp[1];
        head.weight.data_mut().fill(0.0);
        head.bias.data_mut().fill(0.0);
    }
}

/// Learnable state of the whole cascade.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub plan: ChannelPlan,
    pub stages: Vec<StageParams>,
}

impl NetworkParams {
    pub fn init(plan: ChannelPlan, configs: &[StageConfig], seed: u64) -> Result<Self> {
        if configs.is_empty() {
            return Err(Error::arg("a cascade needs at least one stage"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = configs
            .iter()
            .map(|c| StageParams::init(&plan, *c, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { plan, stages })
    }

    /// Default channel plan with the (2, 2, 1) stage plan.
    pub fn standard(seed: u64) -> Self {
        Self::init(ChannelPlan::default(), &StageConfig::standard_cascade(), seed).expect("standard plan is valid")
    }

    pub fn zeros(plan: ChannelPlan, configs: &[StageConfig]) -> Result<Self> {
        if configs.is_empty() {
            return Err(Error::arg("a cascade needs at least one stage"));
        }
        let stages = configs.iter().map(|c| StageParams::zeros(&plan, *c)).collect::<Result<_>>()?;
        Ok(Self { plan, stages })
    }

    pub fn configs(&self) -> Vec<StageConfig> {
        self.stages.iter().map(|s| s.config).collect()
    }

    /// Product of the stage rates.
    pub fn total_rate(&self) -> usize {
        self.stages.iter().map(|s| s.config.rate).product()
    }

    /// Number of learnable scalars.
    pub fn count_parameters(&self) -> usize {
        self.stages.iter().map(StageParams::count).sum()
    }

    pub fn parameter_bytes(&self) -> usize {
        self.count_parameters() * std::mem::size_of::<f64>()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                s.named_tensors()
                    .into_iter()
                    .map(move |(n, t)| (format!("stage{i}.{n}"), t))
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.stages.iter_mut().flat_map(|s| s.tensors_mut()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn zero_offset_heads(&mut self) {
        self.stages.iter_mut().for_each(StageParams::zero_offset_head);
    }

    /// Keeps only the stages a reduced-inference run uses: trailing
    /// refinement stages (rate 1) are dropped when `use_refiner` is false.
    pub fn inference_stages(&self, use_refiner: bool) -> &[StageParams] {
        if use_refiner {
            return &self.stages;
        }
        let mut end = self.stages.len();
        while end > 1 && self.stages[end - 1].config.rate == 1 {
            end -= 1;
        }
        &self.stages[..end]
    }
}
