//! Dataset loading, training runs and held-out evaluation shared by the
//! `train`, `ablate` commands and the acceptance suite.

use std::path::Path;

use anyhow::Context;
use cascade_core::geometry::{AnalyticSurface, PointCloud};
use cascade_core::network::{ChannelPlan, NetworkParams};
use cascade_core::pipeline::{
    evaluate, extract_patches, generate_shape, parse_toy_uri, read_cloud, read_manifest, toy_corpus, toy_surface, upsample_cloud_with,
    PatchSet, UpsampleOptions,
};
use cascade_core::training::{train_with_progress, EpochRecord, SupervisionMode, TrainReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::UserError;

/// Training patches named by `cfg.dataset`.
pub fn load_dataset(cfg: &RunConfig) -> anyhow::Result<PatchSet> {
    if cfg.dataset.starts_with("toy://") {
        let shapes = parse_toy_uri(&cfg.dataset).map_err(|e| UserError::new(e.to_string()))?;
        let surfaces: Vec<AnalyticSurface> = shapes.into_iter().map(|(_, s)| s).collect();
        return Ok(toy_corpus(&surfaces, cfg.toy_points, cfg.patches_per_shape, cfg.patch_gt_size, cfg.seed)?);
    }
    let path = Path::new(&cfg.dataset);
    if !path.exists() {
        return Err(UserError::new(format!("dataset {} does not exist", path.display())).into());
    }
    let mut set = PatchSet::default();
    for entry in read_manifest(path)? {
        let cloud = read_cloud(&entry.cloud, None).with_context(|| format!("loading {}", entry.cloud.display()))?;
        set.extend(extract_patches(&cloud, cfg.patches_per_shape, cfg.patch_gt_size)?);
    }
    Ok(set)
}

/// Trains a freshly initialized network as configured.
pub fn train_run(
    cfg: &RunConfig,
    dataset: &PatchSet,
    checkpoint_dir: Option<&Path>,
    on_epoch: impl FnMut(&EpochRecord),
) -> anyhow::Result<(NetworkParams, TrainReport)> {
    let configs = cfg.stage_configs()?;
    let init = NetworkParams::init(ChannelPlan::default(), &configs, cfg.seed)?;
    let tcfg = cfg.train_config(dataset.len(), checkpoint_dir.map(Path::to_path_buf));
    Ok(train_with_progress(dataset, init, &tcfg, on_epoch)?)
}

/// A shape the network never saw, sampled twice independently: a sparse
/// input and a dense ground truth.
#[derive(Clone, Debug)]
pub struct HeldOutShape {
    pub name: String,
    pub surface: AnalyticSurface,
    pub input: PointCloud,
    pub gt: PointCloud,
}

pub const HELD_OUT_SHAPES: &[&str] = &["thin_torus", "flat_box", "plane"];

pub fn held_out_set(names: &[&str], input_points: usize, gt_points: usize, seed: u64) -> anyhow::Result<Vec<HeldOutShape>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    names
        .iter()
        .map(|&name| {
            let surface = toy_surface(name)?;
            Ok(HeldOutShape {
                name: name.to_string(),
                surface,
                input: generate_shape(&surface, input_points, &mut rng)?,
                gt: generate_shape(&surface, gt_points, &mut rng)?,
            })
        })
        .collect()
}

/// Every input point repeated `r` times in place.
pub fn duplicate_baseline(input: &PointCloud, r: usize) -> PointCloud {
    let pts = input.points().iter().flat_map(|p| std::iter::repeat_n(*p, r)).collect();
    PointCloud::new(pts).expect("input points are finite")
}

#[derive(Clone, Debug)]
pub struct ShapeScore {
    pub name: String,
    pub model_cd: f64,
    pub baseline_cd: f64,
    pub model_p2f: f64,
}

#[derive(Clone, Debug)]
pub struct HeldOutScore {
    pub shapes: Vec<ShapeScore>,
}

impl HeldOutScore {
    pub fn mean_model_cd(&self) -> f64 {
        self.shapes.iter().map(|s| s.model_cd).sum::<f64>() / self.shapes.len() as f64
    }

    pub fn mean_baseline_cd(&self) -> f64 {
        self.shapes.iter().map(|s| s.baseline_cd).sum::<f64>() / self.shapes.len() as f64
    }

    /// How many times lower the model's mean CD is than the baseline's.
    pub fn improvement(&self) -> f64 {
        self.mean_baseline_cd() / self.mean_model_cd()
    }
}

/// x`rate` upsampling of every held-out input, scored against its ground
/// truth next to the duplicate-input baseline.
pub fn score_held_out(
    params: &NetworkParams,
    shapes: &[HeldOutShape],
    rate: usize,
    use_refiner: bool,
    opts: &UpsampleOptions,
) -> anyhow::Result<HeldOutScore> {
    let mut out = Vec::with_capacity(shapes.len());
    for s in shapes {
        let pred = upsample_cloud_with(&s.input, params, rate, use_refiner, opts)?;
        let m = evaluate(&pred, &s.gt, Some(&s.surface))?;
        let base = evaluate(&duplicate_baseline(&s.input, rate), &s.gt, None)?;
        out.push(ShapeScore {
            name: s.name.clone(),
            model_cd: m.cd,
            baseline_cd: base.cd,
            model_p2f: m.p2f.expect("surface supplied"),
        });
    }
    Ok(HeldOutScore { shapes: out })
}

/// Relative gap below which two scores count as tied.
pub const TIE_TOLERANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Holds,
    Inconclusive,
    Reversed,
}

impl Verdict {
    /// Whether `expected_lower <= other` holds, treating gaps within
    /// [`TIE_TOLERANCE`] as a tie.
    pub fn lower_is(expected_lower: f64, other: f64) -> Self {
        let gap = (expected_lower - other).abs() / expected_lower.max(other);
        if gap <= TIE_TOLERANCE {
            Verdict::Inconclusive
        } else if expected_lower < other {
            Verdict::Holds
        } else {
            Verdict::Reversed
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Verdict::Holds => "holds",
            Verdict::Inconclusive => "inconclusive",
            Verdict::Reversed => "reversed",
        }
    }
}

/// Ablation studies: each pairs a variant expected to score
/// lower (better) with one expected to score higher.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Study {
    /// Three stages against two.
    Stages,
    /// Residual offsets against absolute coordinates.
    Residual,
    /// Every stage supervised against only the last.
    Supervision,
}

impl Study {
    pub const ALL: [Study; 3] = [Study::Stages, Study::Residual, Study::Supervision];

    pub fn name(self) -> &'static str {
        match self {
            Study::Stages => "stages",
            Study::Residual => "residual",
            Study::Supervision => "supervision",
        }
    }

    /// Configs of the expected-better and expected-worse arms.
    pub fn arms(self, base: &RunConfig) -> [(String, RunConfig); 2] {
        let mut better = base.clone();
        let mut worse = base.clone();
        match self {
            Study::Stages => {
                better.stages = 3;
                worse.stages = 2;
            }
            Study::Residual => {
                better.residual = true;
                worse.residual = false;
            }
            Study::Supervision => {
                better.supervision = SupervisionMode::AllStages;
                worse.supervision = SupervisionMode::LastStage;
            }
        }
        let label = |c: &RunConfig| match self {
            Study::Stages => format!("{}-stage", c.stages),
            Study::Residual => format!("residual={}", c.residual),
            Study::Supervision => format!("supervision={}", c.supervision),
        };
        [(label(&better), better), (label(&worse), worse)]
    }
}

impl std::str::FromStr for Study {
    type Err = UserError;

    fn from_str(s: &str) -> Result<Self, UserError> {
        Study::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| UserError::new(format!("unknown study {s:?} (expected stages, residual or supervision)")))
    }
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub label: String,
    pub held_out_cd: f64,
    pub final_train_cd: f64,
}

#[derive(Clone, Debug)]
pub struct StudyResult {
    pub study: Study,
    pub better: ArmResult,
    pub worse: ArmResult,
    pub verdict: Verdict,
}

/// Held-out clouds at the training patch density: the input has
/// `toy_points * patch_input_size / patch_gt_size` points, the ground truth
/// `toy_points`.
pub fn held_out_for(cfg: &RunConfig) -> anyhow::Result<Vec<HeldOutShape>> {
    let input = cfg.toy_points * cfg.patch_input_size / cfg.patch_gt_size.max(1);
    held_out_set(HELD_OUT_SHAPES, input, cfg.toy_points, cfg.seed.wrapping_add(1_000_003))
}

/// Trains both arms of every study on the same data and seed and scores
/// them on held-out shapes. Identical arm configs are trained once.
pub fn run_studies(
    base: &RunConfig,
    studies: &[Study],
    mut log: impl FnMut(&str),
) -> anyhow::Result<Vec<StudyResult>> {
    let dataset = load_dataset(base)?;
    let shapes = held_out_for(base)?;
    let mut cache: Vec<(String, ArmResult)> = Vec::new();
    let mut results = Vec::new();
    for &study in studies {
        let mut arms = Vec::new();
        for (label, cfg) in study.arms(base) {
            let key = cfg.to_text();
            if let Some((_, r)) = cache.iter().find(|(k, _)| *k == key) {
                arms.push(ArmResult { label, ..r.clone() });
                continue;
            }
            log(&format!("training {} arm {label}", study.name()));
            let (params, report) = train_run(&cfg, &dataset, None, |_| {})?;
            let score = score_held_out(&params, &shapes, 4, true, &cfg.upsample_options())?;
            let r = ArmResult {
                label,
                held_out_cd: score.mean_model_cd(),
                final_train_cd: *report.final_stage_curve().last().expect("at least one epoch"),
            };
            log(&format!("  held-out CD {:.6e}, final training CD {:.6e}", r.held_out_cd, r.final_train_cd));
            cache.push((key, r.clone()));
            arms.push(r);
        }
        let worse = arms.pop().expect("two arms");
        let better = arms.pop().expect("two arms");
        let verdict = Verdict::lower_is(better.held_out_cd, worse.held_out_cd);
        results.push(StudyResult {
            study,
            better,
            worse,
            verdict,
        });
    }
    Ok(results)
}
