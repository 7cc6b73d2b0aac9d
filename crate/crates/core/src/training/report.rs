//! Per-epoch training log.
//!
//! Text form: one `#` header line naming the columns, then one tab-separated
//! record per epoch:
//!
//! ```text
//! # epoch  loss_stage1  loss_stage2  loss_refined  lr  seconds
//! 1        0.0123       0.0101       0.0098        0.001  41.2
//! ```
//!
//! Upsampling stages are labelled `loss_stage{i}`, refinement stages
//! `loss_refined` (numbered from the second one on). Losses are mean Chamfer
//! distances over the epoch's patches.

use crate::error::{Error, Result};
use crate::network::StageConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage_losses: Vec<f64>,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub stage_labels: Vec<String>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn new(configs: &[StageConfig]) -> Self {
        let mut labels = Vec::with_capacity(configs.len());
        let (mut up, mut refine) = (0, 0);
        for c in configs {
            if c.rate > 1 {
                up += 1;
                labels.push(format!("loss_stage{up}"));
            } else {
                refine += 1;
                labels.push(if refine == 1 {
                    "loss_refined".to_string()
                } else {
                    format!("loss_refined{refine}")
                });
            }
        }
        Self {
            stage_labels: labels,
            epochs: Vec::new(),
        }
    }

    /// Loss of the final stage per epoch.
    pub fn final_stage_curve(&self) -> Vec<f64> {
        self.epochs
            .iter()
            .map(|e| *e.stage_losses.last().expect("at least one stage"))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# epoch");
        for l in &self.stage_labels {
            out.push('\t');
            out.push_str(l);
        }
        out.push_str("\tlr\tseconds\n");
        for e in &self.epochs {
            out.push_str(&e.epoch.to_string());
            for v in &e.stage_losses {
                out.push('\t');
                out.push_str(&v.to_string());
            }
            out.push_str(&format!("\t{}\t{:.3}\n", e.lr, e.seconds));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header = lines
            .next()
            .and_then(|(_, l)| l.strip_prefix("# "))
            .ok_or_else(|| Error::arg("train report: missing '# epoch ...' header"))?;
        let cols: Vec<&str> = header.split('\t').collect();
        if cols.len() < 4 || cols[0] != "epoch" || cols[cols.len() - 2] != "lr" || cols[cols.len() - 1] != "seconds" {
            return Err(Error::arg(format!("train report: malformed header {header:?}")));
        }
        let stage_labels: Vec<String> = cols[1..cols.len() - 2].iter().map(|s| s.to_string()).collect();
        let mut epochs = Vec::new();
        for (no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |what: &str| Error::arg(format!("train report line {}: {what}", no + 1));
            if fields.len() != cols.len() {
                return Err(bad("wrong column count"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
            epochs.push(EpochRecord {
                epoch: fields[0].parse().map_err(|_| bad("bad epoch"))?,
                stage_losses: fields[1..fields.len() - 2].iter().map(|s| num(s)).collect::<Result<_>>()?,
                lr: num(fields[fields.len() - 2])?,
                seconds: num(fields[fields.len() - 1])?,
            });
        }
        Ok(Self { stage_labels, epochs })
    }
}
