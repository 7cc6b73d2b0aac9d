//! Run configuration: a flat `key = value` file, one documented key per line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cascade_core::network::{FeatureExtractor, StageConfig};
use cascade_core::pipeline::UpsampleOptions;
use cascade_core::training::{SupervisionMode, TrainConfig};
use sha2::{Digest, Sha256};

use crate::UserError;

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
    pub origin: &'static str,
}

const PUBLISHED: &str = "published training setup";
const CHOSEN: &str = "not stated in the published method; chosen here";
const TOOLING: &str = "tooling";

pub const KEYS: &[KeySpec] = &[
    KeySpec { key: "dataset", default: "toy://all", doc: "toy://shape[,shape...] (toy://all = sphere,torus,box) or a manifest of clouds", origin: TOOLING },
    KeySpec { key: "toy_points", default: "8192", doc: "dense ground-truth points generated per toy shape", origin: CHOSEN },
    KeySpec { key: "patches_per_shape", default: "64", doc: "training patches cut from every shape or cloud", origin: CHOSEN },
    KeySpec { key: "epochs", default: "100", doc: "training epochs", origin: PUBLISHED },
    KeySpec { key: "batch_size", default: "64", doc: "patches per optimizer step", origin: PUBLISHED },
    KeySpec { key: "lr0", default: "0.001", doc: "initial learning rate", origin: PUBLISHED },
    KeySpec { key: "lr_decay", default: "0.7", doc: "multiplicative learning-rate decay", origin: PUBLISHED },
    KeySpec { key: "decay_interval", default: "50000", doc: "iterations between decays; 'auto' fits two decays into the run", origin: PUBLISHED },
    KeySpec { key: "patch_gt_size", default: "1024", doc: "ground-truth points per training patch", origin: PUBLISHED },
    KeySpec { key: "patch_input_size", default: "256", doc: "input points per training patch, drawn from the ground truth", origin: PUBLISHED },
    KeySpec { key: "supervision", default: "all_stages", doc: "all_stages sums every stage's Chamfer loss; last_stage supervises only the final output", origin: PUBLISHED },
    KeySpec { key: "grad_clip", default: "off", doc: "global gradient-norm cap, or off", origin: CHOSEN },
    KeySpec { key: "checkpoint_every", default: "0", doc: "save a checkpoint every N epochs (0: only the final one)", origin: TOOLING },
    KeySpec { key: "stages", default: "3", doc: "cascade length: 1 (one x4 stage), 2 (x2,x2), 3 (x2,x2,refine), 4 (x2,x2,refine,refine)", origin: PUBLISHED },
    KeySpec { key: "extractor", default: "transformer", doc: "feature extractor: transformer or mlp_only", origin: PUBLISHED },
    KeySpec { key: "residual", default: "true", doc: "predict offsets added to duplicated inputs instead of absolute coordinates", origin: PUBLISHED },
    KeySpec { key: "position_encoding", default: "true", doc: "relative position encoding inside attention", origin: PUBLISHED },
    KeySpec { key: "k_attention", default: "16", doc: "neighbours per attention query", origin: CHOSEN },
    KeySpec { key: "patch_size", default: "256", doc: "input points per patch at inference", origin: PUBLISHED },
    KeySpec { key: "num_seeds", default: "auto", doc: "inference patches per pass; auto is ceil(3 M / patch_size) plus any needed for full coverage", origin: CHOSEN },
    KeySpec { key: "normalize_patches", default: "true", doc: "run every patch in its own unit-sphere frame", origin: CHOSEN },
    KeySpec { key: "rate", default: "4", doc: "upsampling rate: 4, or 16 by applying the network twice", origin: PUBLISHED },
    KeySpec { key: "use_refiner", default: "true", doc: "run the refinement stage at inference", origin: PUBLISHED },
    KeySpec { key: "seed", default: "0", doc: "seed for data generation, initialization and sampling", origin: TOOLING },
    KeySpec { key: "threads", default: "1", doc: "worker threads; results do not depend on it", origin: TOOLING },
    KeySpec { key: "run_root", default: "runs", doc: "directory holding run directories", origin: TOOLING },
];

/// Keys that do not change results and so stay out of the run hash.
const UNHASHED: &[&str] = &["seed", "threads", "run_root", "checkpoint_every"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: String,
    pub toy_points: usize,
    pub patches_per_shape: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    /// `None` fits two decays into the run.
    pub decay_interval: Option<usize>,
    pub patch_gt_size: usize,
    pub patch_input_size: usize,
    pub supervision: SupervisionMode,
    pub grad_clip: Option<f64>,
    pub checkpoint_every: usize,
    pub stages: usize,
    pub extractor: FeatureExtractor,
    pub residual: bool,
    pub position_encoding: bool,
    pub k_attention: usize,
    pub patch_size: usize,
    pub num_seeds: Option<usize>,
    pub normalize_patches: bool,
    pub rate: usize,
    pub use_refiner: bool,
    pub seed: u64,
    pub threads: usize,
    pub run_root: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            dataset: String::new(),
            toy_points: 0,
            patches_per_shape: 0,
            epochs: 0,
            batch_size: 0,
            lr0: 0.0,
            lr_decay: 0.0,
            decay_interval: None,
            patch_gt_size: 0,
            patch_input_size: 0,
            supervision: SupervisionMode::AllStages,
            grad_clip: None,
            checkpoint_every: 0,
            stages: 0,
            extractor: FeatureExtractor::Transformer,
            residual: true,
            position_encoding: true,
            k_attention: 0,
            patch_size: 0,
            num_seeds: None,
            normalize_patches: true,
            rate: 0,
            use_refiner: true,
            seed: 0,
            threads: 1,
            run_root: PathBuf::new(),
        };
        for k in KEYS {
            c.set(k.key, k.default).expect("defaults parse");
        }
        c
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> anyhow::Result<T> {
    value
        .parse()
        .map_err(|_| UserError::new(format!("config key {key}: cannot parse {value:?}")).into())
}

fn parse_bool(key: &str, value: &str) -> anyhow::Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(UserError::new(format!("config key {key}: expected true or false, got {value:?}")).into()),
    }
}

fn parse_auto<T: std::str::FromStr>(key: &str, value: &str, auto: &str) -> anyhow::Result<Option<T>> {
    if value == auto {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = v.to_string(),
            "toy_points" => self.toy_points = parse(key, v)?,
            "patches_per_shape" => self.patches_per_shape = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr0" => self.lr0 = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "decay_interval" => self.decay_interval = parse_auto(key, v, "auto")?,
            "patch_gt_size" => self.patch_gt_size = parse(key, v)?,
            "patch_input_size" => self.patch_input_size = parse(key, v)?,
            "supervision" => self.supervision = v.parse().map_err(|e| UserError::new(format!("config key {key}: {e}")))?,
            "grad_clip" => self.grad_clip = parse_auto(key, v, "off")?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "stages" => self.stages = parse(key, v)?,
            "extractor" => self.extractor = v.parse().map_err(|e| UserError::new(format!("config key {key}: {e}")))?,
            "residual" => self.residual = parse_bool(key, v)?,
            "position_encoding" => self.position_encoding = parse_bool(key, v)?,
            "k_attention" => self.k_attention = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "num_seeds" => self.num_seeds = parse_auto(key, v, "auto")?,
            "normalize_patches" => self.normalize_patches = parse_bool(key, v)?,
            "rate" => self.rate = parse(key, v)?,
            "use_refiner" => self.use_refiner = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "run_root" => self.run_root = PathBuf::from(v),
            other => bail!(UserError::new(format!(
                "unknown config key {other:?} (run `cascade config` for the list)"
            ))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        fn opt<T: ToString>(v: &Option<T>, none: &str) -> String {
            v.as_ref().map_or_else(|| none.to_string(), T::to_string)
        }
        match key {
            "dataset" => self.dataset.clone(),
            "toy_points" => self.toy_points.to_string(),
            "patches_per_shape" => self.patches_per_shape.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr0" => self.lr0.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "decay_interval" => opt(&self.decay_interval, "auto"),
            "patch_gt_size" => self.patch_gt_size.to_string(),
            "patch_input_size" => self.patch_input_size.to_string(),
            "supervision" => self.supervision.to_string(),
            "grad_clip" => opt(&self.grad_clip, "off"),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "stages" => self.stages.to_string(),
            "extractor" => self.extractor.name().to_string(),
            "residual" => self.residual.to_string(),
            "position_encoding" => self.position_encoding.to_string(),
            "k_attention" => self.k_attention.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "num_seeds" => opt(&self.num_seeds, "auto"),
            "normalize_patches" => self.normalize_patches.to_string(),
            "rate" => self.rate.to_string(),
            "use_refiner" => self.use_refiner.to_string(),
            "seed" => self.seed.to_string(),
            "threads" => self.threads.to_string(),
            "run_root" => self.run_root.display().to_string(),
            other => unreachable!("undocumented key {other}"),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys not set keep
    /// their defaults.
    pub fn parse_text(text: &str, origin: &str) -> anyhow::Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| UserError::new(format!("{origin}:{}: expected 'key = value'", i + 1)))?;
            cfg.set(key.trim(), value)
                .map_err(|e| UserError::new(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| UserError::new(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_text(&text, &path.display().to_string())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> anyhow::Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| UserError::new(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// The full documented file, every key present.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            writeln!(out, "# {} [default {}; {}]", k.doc, k.default, k.origin).expect("string write");
            writeln!(out, "{} = {}", k.key, self.get(k.key)).expect("string write");
        }
        out
    }

    /// Hex digest over every result-affecting key.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for k in KEYS.iter().filter(|k| !UNHASHED.contains(&k.key)) {
            h.update(k.key.as_bytes());
            h.update(b"=");
            h.update(self.get(k.key).as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())[..12].to_string()
    }

    /// `<run_root>/<hash>-s<seed>`.
    pub fn run_dir(&self) -> PathBuf {
        self.run_root.join(format!("{}-s{}", self.hash(), self.seed))
    }

    pub fn stage_configs(&self) -> anyhow::Result<Vec<StageConfig>> {
        let rates = StageConfig::cascade_rates(self.stages).map_err(|e| UserError::new(e.to_string()))?;
        let configs: Vec<StageConfig> = rates
            .into_iter()
            .map(|r| StageConfig {
                rate: r,
                k_attention: self.k_attention,
                extractor: self.extractor,
                use_residual: self.residual,
                use_position_encoding: self.position_encoding,
            })
            .collect();
        for c in &configs {
            c.validate().map_err(|e| UserError::new(e.to_string()))?;
        }
        Ok(configs)
    }

    pub fn train_config(&self, num_patches: usize, checkpoint_dir: Option<PathBuf>) -> TrainConfig {
        let mut cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            lr_decay: self.lr_decay,
            decay_interval_iters: self.decay_interval.unwrap_or(1),
            patch_gt_size: self.patch_gt_size,
            patch_input_size: self.patch_input_size,
            seed: self.seed,
            supervision: self.supervision,
            grad_clip: self.grad_clip,
            checkpoint_every: self.checkpoint_every,
            checkpoint_dir,
            threads: self.threads,
            ..TrainConfig::default()
        };
        if self.decay_interval.is_none() {
            cfg.scale_schedule_to(num_patches);
        }
        cfg
    }

    pub fn upsample_options(&self) -> UpsampleOptions {
        UpsampleOptions {
            patch_size: self.patch_size,
            num_seeds: self.num_seeds,
            normalize_patches: self.normalize_patches,
            threads: self.threads,
        }
    }
}

/// Key reference for `--help`.
pub fn key_help() -> String {
    let mut out = String::from("Config keys (file lines `key = value`, or `--set key=value`):\n");
    for k in KEYS {
        writeln!(out, "  {:<18} default {:<12} {} ({})", k.key, k.default, k.doc, k.origin).expect("string write");
    }
    out
}

pub fn write_config(cfg: &RunConfig, path: &Path) -> anyhow::Result<()> {
    fs::write(path, cfg.to_text()).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse_text(&cfg.to_text(), "t").unwrap(), cfg);
        for k in KEYS {
            assert_eq!(cfg.get(k.key), k.default, "{}", k.key);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse_text("epochs = 2\nlearning_rate = 1\n", "f").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        assert!(err.downcast_ref::<UserError>().is_some());
        assert!(RunConfig::parse_text("epochs 2\n", "f").is_err());
        assert!(RunConfig::parse_text("epochs = two\n", "f").is_err());
    }

    #[test]
    fn hash_ignores_seed_and_threads() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 5;
        b.threads = 4;
        assert_eq!(a.hash(), b.hash());
        b.epochs = 3;
        assert_ne!(a.hash(), b.hash());
        assert!(b.run_dir().ends_with(format!("{}-s5", b.hash())));
    }

    #[test]
    fn stage_plans() {
        let mut c = RunConfig::default();
        let rates = |c: &RunConfig| c.stage_configs().unwrap().iter().map(|s| s.rate).collect::<Vec<_>>();
        assert_eq!(rates(&c), [2, 2, 1]);
        c.stages = 2;
        assert_eq!(rates(&c), [2, 2]);
        c.stages = 4;
        assert_eq!(rates(&c), [2, 2, 1, 1]);
        c.stages = 0;
        assert!(c.stage_configs().is_err());
    }
}
