//! End-to-end optimization of the cascade against summed per-stage Chamfer
//! losses.

mod optim;
mod report;

pub use optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use report::{EpochRecord, TrainReport};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{chamfer_distance, chamfer_loss, Point, PointCloud};
use crate::network::{cascade_forward, save_checkpoint, NetworkParams, NetworkVars};
use crate::pipeline::PatchSet;
use crate::tensor::{Tape, Tensor, Var};

/// Which stage outputs contribute to the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SupervisionMode {
    AllStages,
    LastStage,
}

impl SupervisionMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::AllStages => "all_stages",
            Self::LastStage => "last_stage",
        }
    }
}

impl fmt::Display for SupervisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SupervisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_stages" | "all" => Ok(Self::AllStages),
            "last_stage" | "last" => Ok(Self::LastStage),
            other => Err(Error::arg(format!(
                "unknown supervision mode {other:?} (expected all_stages or last_stage)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_interval_iters: usize,
    pub patch_gt_size: usize,
    pub patch_input_size: usize,
    pub seed: u64,
    pub supervision: SupervisionMode,
    pub adam: AdamConfig,
    /// Global gradient-norm cap; `None` trains without clipping.
    pub grad_clip: Option<f64>,
    /// Save a checkpoint every this many epochs into `checkpoint_dir` (0: never).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Worker threads for per-patch gradients. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr0: 1e-3,
            lr_decay: 0.7,
            decay_interval_iters: 50_000,
            patch_gt_size: 1024,
            patch_input_size: 256,
            seed: 0,
            supervision: SupervisionMode::AllStages,
            adam: AdamConfig::default(),
            grad_clip: None,
            checkpoint_every: 0,
            checkpoint_dir: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn iterations_per_epoch(&self, patches: usize) -> usize {
        patches.div_ceil(self.batch_size.max(1))
    }

    /// Sets the decay interval so the run sees two decays, at one and two
    /// thirds of its iterations.
    pub fn scale_schedule_to(&mut self, patches: usize) {
        let total = self.epochs * self.iterations_per_epoch(patches);
        self.decay_interval_iters = total.div_ceil(3).max(1);
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_interval_iters == 0 {
            return Err(Error::arg("epochs, batch_size and decay_interval_iters must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::arg("lr0 must be positive and lr_decay in (0, 1]"));
        }
        if self.patch_input_size == 0 || self.patch_input_size > self.patch_gt_size {
            return Err(Error::arg("patch_input_size must be in 1..=patch_gt_size"));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(Error::arg("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

/// Step-decayed learning rate: `lr0 * lr_decay ^ floor(iteration / interval)`.
pub fn lr_at(iteration: usize, cfg: &TrainConfig) -> f64 {
    let decays = (iteration / cfg.decay_interval_iters.max(1)) as i32;
    cfg.lr0 * cfg.lr_decay.powi(decays)
}

/// Draws the sparse input as a uniform subset (without replacement) of a
/// ground-truth patch.
pub fn sample_training_pair(gt_patch: &PointCloud, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(PointCloud, PointCloud)> {
    if gt_patch.len() != cfg.patch_gt_size {
        return Err(Error::arg(format!(
            "training patch has {} points, expected {}",
            gt_patch.len(),
            cfg.patch_gt_size
        )));
    }
    let picks = rand::seq::index::sample(rng, gt_patch.len(), cfg.patch_input_size);
    let input = picks.iter().map(|i| gt_patch.points()[i]).collect();
    Ok((PointCloud::new(input)?, gt_patch.clone()))
}

/// Summed Chamfer loss over the supervised stage outputs.
///
/// Returns the loss node and the Chamfer distance of every stage output
/// (supervised or not) for reporting.
pub fn total_loss(tape: &mut Tape, outputs: &[Var], gt: &[Point], mode: SupervisionMode) -> Result<(Var, Vec<f64>)> {
    if outputs.is_empty() {
        return Err(Error::arg("total_loss needs at least one stage output"));
    }
    let mut per_stage = Vec::with_capacity(outputs.len());
    let mut loss: Option<Var> = None;
    for (i, &out) in outputs.iter().enumerate() {
        let supervised = mode == SupervisionMode::AllStages || i + 1 == outputs.len();
        if supervised {
            let cd = chamfer_loss(tape, out, gt)?;
            per_stage.push(tape.value(cd).item().expect("scalar"));
            loss = Some(match loss {
                Some(acc) => tape.add(acc, cd)?,
                None => cd,
            });
        } else {
            per_stage.push(chamfer_distance(&tape.value(out).to_points()?, gt)?);
        }
    }
    Ok((loss.expect("last stage is always supervised"), per_stage))
}

struct PatchGradient {
    grads: Vec<Vec<f64>>,
    loss: f64,
    stage_losses: Vec<f64>,
}

fn patch_gradient(params: &NetworkParams, input: &PointCloud, target: &[Point], mode: SupervisionMode) -> Result<PatchGradient> {
    let mut tape = Tape::new();
    let vars = NetworkVars::register(&mut tape, params, true);
    let x = tape.constant(Tensor::from_points(input.points()));
    let outs = cascade_forward(&mut tape, x, &vars.stages)?;
    let (loss, stage_losses) = total_loss(&mut tape, &outs.stages, target, mode)?;
    let loss_value = tape.value(loss).item().expect("scalar");
    if loss_value.is_finite() {
        tape.backward(loss)?;
    }
    let grads = vars.all().into_iter().map(|v| tape.grad_tensor(v).into_data()).collect();
    Ok(PatchGradient {
        grads,
        loss: loss_value,
        stage_losses,
    })
}

/// Trains `init` on the ground-truth patches of `dataset`.
pub fn train(dataset: &PatchSet, init: NetworkParams, cfg: &TrainConfig) -> Result<(NetworkParams, TrainReport)> {
    train_with_progress(dataset, init, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress(
    dataset: &PatchSet,
    init: NetworkParams,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(NetworkParams, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::arg("training dataset has no patches"));
    }
    let rate = init.total_rate();
    if cfg.patch_input_size * rate != cfg.patch_gt_size {
        return Err(Error::arg(format!(
            "patch sizes {} -> {} do not match the cascade's x{rate} rate",
            cfg.patch_input_size, cfg.patch_gt_size
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::arg(format!("thread pool: {e}")))?;

    let mut params = init;
    let mut state = AdamState::new(params.named_tensors().into_iter().map(|(_, t)| t));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::new(&params.configs());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut iteration = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = vec![0.0; params.stages.len()];
        let mut seen = 0usize;
        let mut lr = lr_at(iteration, cfg);

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let pairs = batch
                .iter()
                .map(|&i| sample_training_pair(&dataset.patches[i].cloud, cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let results: Vec<Result<PatchGradient>> = pool.install(|| {
                pairs
                    .par_iter()
                    .map(|(input, target)| patch_gradient(&params, input, target.points(), cfg.supervision))
                    .collect()
            });

            let mut grads: Option<Vec<Vec<f64>>> = None;
            for result in results {
                let pg = result?;
                if !pg.loss.is_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        batch: batch_idx,
                        stage_losses: pg.stage_losses,
                    });
                }
                for (s, v) in sums.iter_mut().zip(&pg.stage_losses) {
                    *s += v;
                }
                seen += 1;
                match &mut grads {
                    None => grads = Some(pg.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&pg.grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            if let Some(max_norm) = cfg.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            lr = lr_at(iteration, cfg);
            adam_step(&mut params.tensors_mut(), &grads, &mut state, lr, &cfg.adam)?;
            iteration += 1;
        }

        let record = EpochRecord {
            epoch,
            stage_losses: sums.iter().map(|s| s / seen as f64).collect(),
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        report.epochs.push(record);

        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                save_checkpoint(&params, &dir.join(format!("epoch{epoch:04}.ckpt")))?;
            }
        }
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.001);
        assert!((lr_at(50_000, &cfg) - 0.0007).abs() < 1e-15);
        assert!((lr_at(100_000, &cfg) - 0.00049).abs() < 1e-15);
        assert_eq!(lr_at(49_999, &cfg), 0.001);
    }

    #[test]
    fn schedule_is_non_increasing() {
        let mut cfg = TrainConfig::default();
        cfg.decay_interval_iters = 7;
        let lrs: Vec<f64> = (0..100).map(|i| lr_at(i, &cfg)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn scaled_schedule_decays_twice() {
        let mut cfg = TrainConfig {
            epochs: 10,
            batch_size: 8,
            ..TrainConfig::default()
        };
        cfg.scale_schedule_to(192);
        let total = 10 * 24;
        let decays = (0..total).map(|i| lr_at(i, &cfg)).collect::<Vec<_>>();
        let mut distinct = decays.clone();
        distinct.dedup();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn parse_supervision_modes() {
        assert_eq!("last_stage".parse::<SupervisionMode>().unwrap(), SupervisionMode::LastStage);
        assert_eq!("all_stages".parse::<SupervisionMode>().unwrap(), SupervisionMode::AllStages);
        assert!("some".parse::<SupervisionMode>().is_err());
    }
}
