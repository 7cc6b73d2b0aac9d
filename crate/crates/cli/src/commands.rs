use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use cascade_core::geometry::{PointCloud, Surface};
use cascade_core::gradcheck::run_gradcheck;
use cascade_core::network::{load_checkpoint, save_checkpoint, ChannelPlan};
use cascade_core::pipeline::{evaluate, read_cloud, read_manifest, read_mesh, toy_surface, upsample_cloud_with, write_cloud, Metrics};
use cascade_core::tensor::OpKind;

use crate::config::{key_help, write_config, RunConfig};
use crate::experiment::{load_dataset, run_studies, train_run, Study, Verdict};
use crate::{InvariantViolation, UserError};

#[derive(Debug, Parser)]
#[command(name = "cascade", version, about = "Cascaded coarse-to-fine point cloud upsampling", after_long_help = key_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a cascade and write its checkpoint and loss report into a run directory.
    #[command(after_long_help = key_help())]
    Train(TrainArgs),
    /// Upsample a point cloud file with a trained checkpoint.
    Upsample(UpsampleArgs),
    /// Score predicted clouds against ground truth (CD, HD, P2F, all x10^3).
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Train paired variants and report whether the expected ordering holds.
    #[command(after_long_help = key_help())]
    Ablate(AblateArgs),
    /// Print the documented configuration (defaults merged with any file and overrides).
    #[command(after_long_help = key_help())]
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, extra: Vec<String>) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        cfg.apply_overrides(&extra)?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Cascade length (2, 3 or 4; 1 is a single x4 stage).
    #[arg(long)]
    pub stages: Option<usize>,
    /// all_stages or last_stage.
    #[arg(long)]
    pub supervision: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Write into this directory instead of `<run_root>/<hash>-s<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct UpsampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// 4, or 16 by running the network twice.
    #[arg(long, default_value_t = 4, value_parser = parse_rate)]
    pub rate: usize,
    /// Skip the refinement stage.
    #[arg(long)]
    pub no_refiner: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub threads: Option<usize>,
}

fn parse_rate(s: &str) -> Result<usize, String> {
    match s {
        "4" => Ok(4),
        "16" => Ok(16),
        _ => Err(format!("rate must be 4 or 16, got {s}")),
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "manifest")]
    pub pred: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    pub gt: Option<PathBuf>,
    /// OFF mesh of the true surface, for P2F.
    #[arg(long, conflicts_with = "surface")]
    pub mesh: Option<PathBuf>,
    /// Built-in analytic surface (toy shape name) for P2F.
    #[arg(long)]
    pub surface: Option<String>,
    /// Manifest of `gt [mesh]` lines; predictions are read from `--pred-dir`
    /// under the same file names.
    #[arg(long, requires = "pred_dir", conflicts_with_all = ["pred", "gt"])]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub pred_dir: Option<PathBuf>,
    /// Print JSON with unscaled values instead of the table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale this operation's gradient (negative control), e.g. `deconv1d_points`.
    #[arg(long, value_name = "OP")]
    pub corrupt: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// stages, residual, supervision or all.
    #[arg(long, default_value = "all")]
    pub study: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Upsample(a) => cmd_upsample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Config(a) => {
            print!("{}", a.resolve(Vec::new())?.to_text());
            Ok(())
        }
    }
}

fn flag<T: ToString>(key: &str, v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| format!("{key}={}", v.to_string()))
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let extra: Vec<String> = [
        flag("dataset", &a.dataset),
        flag("epochs", &a.epochs),
        flag("batch_size", &a.batch_size),
        flag("stages", &a.stages),
        flag("supervision", &a.supervision),
        flag("seed", &a.seed),
        flag("threads", &a.threads),
    ]
    .into_iter()
    .flatten()
    .collect();
    let cfg = a.config.resolve(extra)?;
    let dir = a.out.clone().unwrap_or_else(|| cfg.run_dir());
    fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    write_config(&cfg, &dir.join("config.txt"))?;

    let dataset = load_dataset(&cfg)?;
    eprintln!("training on {} patches from {}", dataset.len(), cfg.dataset);
    let epochs = cfg.epochs;
    let (params, report) = train_run(&cfg, &dataset, (cfg.checkpoint_every > 0).then_some(dir.as_path()), |e| {
        let losses: Vec<String> = e.stage_losses.iter().map(|l| format!("{l:.6e}")).collect();
        eprintln!("epoch {}/{epochs}  cd {}  lr {:.3e}  {:.1}s", e.epoch, losses.join(" "), e.lr, e.seconds);
    })?;
    if !params.is_finite() {
        return Err(InvariantViolation("trained parameters are not finite".into()).into());
    }
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&params, &ckpt)?;
    let report_path = dir.join("train_report.tsv");
    fs::write(&report_path, report.to_text()).with_context(|| format!("writing {}", report_path.display()))?;
    println!("run directory: {}", dir.display());
    println!("checkpoint: {}", ckpt.display());
    println!("report: {}", report_path.display());
    Ok(())
}

fn cmd_upsample(a: UpsampleArgs) -> anyhow::Result<()> {
    let cfg = a.config.resolve(flag("threads", &a.threads).into_iter().collect())?;
    let params = load_checkpoint(&a.checkpoint, None).map_err(|e| UserError::new(format!("{}: {e}", a.checkpoint.display())))?;
    if params.plan != ChannelPlan::default() {
        return Err(UserError::new(format!(
            "{}: channel plan {:?} does not match this build ({:?})",
            a.checkpoint.display(),
            params.plan,
            ChannelPlan::default()
        ))
        .into());
    }
    let input = read_cloud(&a.input, None)?;
    let out = upsample_cloud_with(&input, &params, a.rate, !a.no_refiner, &cfg.upsample_options())?;
    write_cloud(&out, &a.output, None)?;
    println!("{} -> {} points written to {}", input.len(), out.len(), a.output.display());
    Ok(())
}

fn surface_for(a: &EvalArgs, mesh: Option<&Path>) -> anyhow::Result<Option<Box<dyn Surface>>> {
    if let Some(m) = mesh {
        return Ok(Some(Box::new(read_mesh(m)?)));
    }
    match &a.surface {
        Some(name) => Ok(Some(Box::new(toy_surface(name).map_err(|e| UserError::new(e.to_string()))?))),
        None => Ok(None),
    }
}

fn load_nonempty(path: &Path) -> anyhow::Result<PointCloud> {
    let c = read_cloud(path, None)?;
    if c.is_empty() {
        return Err(UserError::new(format!("{} contains no points", path.display())).into());
    }
    Ok(c)
}

fn json_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        "null".into()
    }
}

fn metrics_json(name: Option<&str>, m: &Metrics) -> String {
    let mut fields = Vec::new();
    if let Some(n) = name {
        fields.push(format!("\"cloud\":{n:?}"));
    }
    fields.push(format!("\"cd\":{}", json_number(m.cd)));
    fields.push(format!("\"hd\":{}", json_number(m.hd)));
    fields.push(format!("\"p2f\":{}", m.p2f.map_or("null".into(), json_number)));
    format!("{{{}}}", fields.join(","))
}

fn metrics_row(m: &Metrics) -> String {
    let p2f = m.p2f.map_or_else(|| "-".to_string(), |v| format!("{:.3}", v * 1e3));
    format!("{:<10.3} {:<10.3} {}", m.cd * 1e3, m.hd * 1e3, p2f)
}

const TABLE_HEADER: &str = "cd_x1e3    hd_x1e3    p2f_x1e3";

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    if let Some(manifest) = &a.manifest {
        let pred_dir = a.pred_dir.as_ref().expect("clap enforces --pred-dir");
        let mut rows = Vec::new();
        for entry in read_manifest(manifest)? {
            let name = entry
                .cloud
                .file_name()
                .ok_or_else(|| UserError::new(format!("{} has no file name", entry.cloud.display())))?;
            let pred = load_nonempty(&pred_dir.join(name))?;
            let gt = load_nonempty(&entry.cloud)?;
            let surface = surface_for(&a, entry.mesh.as_deref())?;
            let m = evaluate(&pred, &gt, surface.as_deref())?;
            rows.push((name.to_string_lossy().into_owned(), m));
        }
        if a.json {
            let items: Vec<String> = rows.iter().map(|(n, m)| metrics_json(Some(n), m)).collect();
            println!("[{}]", items.join(","));
        } else {
            println!("{:<24} {TABLE_HEADER}", "cloud");
            for (n, m) in &rows {
                println!("{n:<24} {}", metrics_row(m));
            }
            let k = rows.len() as f64;
            let mean = Metrics {
                cd: rows.iter().map(|(_, m)| m.cd).sum::<f64>() / k,
                hd: rows.iter().map(|(_, m)| m.hd).sum::<f64>() / k,
                p2f: rows
                    .iter()
                    .map(|(_, m)| m.p2f)
                    .sum::<Option<f64>>()
                    .map(|s| s / k),
            };
            println!("{:<24} {}", "mean", metrics_row(&mean));
        }
        return Ok(());
    }
    let pred = load_nonempty(a.pred.as_ref().expect("clap enforces --pred"))?;
    let gt = load_nonempty(a.gt.as_ref().expect("clap enforces --gt"))?;
    let surface = surface_for(&a, a.mesh.as_deref())?;
    let m = evaluate(&pred, &gt, surface.as_deref())?;
    if a.json {
        println!("{}", metrics_json(None, &m));
    } else {
        println!("{TABLE_HEADER}");
        println!("{}", metrics_row(&m));
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let fault = match &a.corrupt {
        Some(name) => Some(
            OpKind::from_name(name)
                .filter(|k| *k != OpKind::Leaf)
                .ok_or_else(|| UserError::new(format!("unknown operation {name:?}")))?,
        ),
        None => None,
    };
    let report = run_gradcheck(a.seed, fault)?;
    print!("{report}");
    if report.passed() {
        println!("all {} cases within tolerance (worst {:.3e})", report.cases.len(), report.worst());
        return Ok(());
    }
    let failed: Vec<String> = report
        .failures()
        .iter()
        .map(|c| format!("{} ({})", c.name, c.op.map_or("composite", OpKind::name)))
        .collect();
    Err(InvariantViolation(format!("gradient check failed for {}", failed.join(", "))).into())
}

fn cmd_ablate(a: AblateArgs) -> anyhow::Result<()> {
    let extra: Vec<String> = [flag("epochs", &a.epochs), flag("seed", &a.seed)].into_iter().flatten().collect();
    let cfg = a.config.resolve(extra)?;
    let studies: Vec<Study> = if a.study == "all" {
        Study::ALL.to_vec()
    } else {
        a.study.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>()?
    };
    let results = run_studies(&cfg, &studies, |m| eprintln!("{m}"))?;
    println!("{:<12} {:<28} {:<14} {:<28} {:<14} verdict", "study", "expected lower", "held-out CD", "other", "held-out CD");
    for r in &results {
        println!(
            "{:<12} {:<28} {:<14.6e} {:<28} {:<14.6e} {}",
            r.study.name(),
            r.better.label,
            r.better.held_out_cd,
            r.worse.label,
            r.worse.held_out_cd,
            r.verdict.name()
        );
    }
    if results.iter().any(|r| r.verdict == Verdict::Reversed) {
        eprintln!("note: at least one ordering is reversed at this scale");
    }
    Ok(())
}
