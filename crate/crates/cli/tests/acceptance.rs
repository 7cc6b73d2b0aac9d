//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//! A failing criterion only fails the process when `ACCEPTANCE_STRICT=1`, so
//! `cargo test` reports the verdicts without hiding the other test targets.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p cascade-cli --test acceptance -- 2 4`.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cascade_cli::config::RunConfig;
use cascade_cli::experiment::{held_out_for, load_dataset, run_studies, score_held_out, train_run, Study, Verdict};
use cascade_core::geometry::{
    chamfer_distance, dist2, farthest_point_sample, hausdorff_distance, knn_brute_force, knn_indices, point_to_surface,
    AnalyticSurface, Point, PointCloud, TriangleMesh,
};
use cascade_core::gradcheck::{run_gradcheck, GRADCHECK_TOLERANCE};
use cascade_core::network::{save_checkpoint, write_checkpoint, NetworkParams};
use cascade_core::pipeline::{evaluate, generate_shape, read_cloud, toy_surface, upsample_cloud, write_cloud};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances and budgets.
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const IDENTITY_CD_TOL: f64 = 1e-12;
const METRIC_TOL: f64 = 1e-9;
const MESH_P2F_TOL: f64 = 1e-4;
const METRIC_TRIALS: usize = 100;
const METRIC_MAX_POINTS: usize = 200;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const TRAIN_LOSS_RATIO: f64 = 0.5;
const HELD_OUT_IMPROVEMENT: f64 = 2.0;
const EQUIVARIANCE_TOL: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Criterion = (usize, &'static str, fn() -> anyhow::Result<Outcome>);

const CRITERIA: [Criterion; 8] = [
    (1, "gradient suite", gradient_suite),
    (2, "residual identity", residual_identity),
    (3, "metric oracles", metric_oracles),
    (4, "count contract", count_contract),
    (5, "desk-scale training", desk_scale_training),
    (6, "ablation directions", ablation_directions),
    (7, "determinism", determinism),
    (8, "permutation equivariance", permutation_equivariance),
];

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = run().unwrap_or_else(|e| outcome(false, format!("error: {e:#}")));
        let status = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("{status} {id} {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {failed} failing");
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

fn cascade_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cascade"))
}

fn run_bin(args: &[&str]) -> anyhow::Result<()> {
    let out = cascade_bin().args(args).output()?;
    anyhow::ensure!(out.status.success(), "cascade {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn sphere_cloud(n: usize, seed: u64) -> PointCloud {
    let s = AnalyticSurface::sphere(1.0).unwrap();
    generate_shape(&s, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn gradient_suite() -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let report = run_gradcheck(0, None)?;
    let elapsed = start.elapsed();
    let failures: Vec<&str> = report.failures().iter().map(|c| c.name).collect();
    Ok(outcome(
        report.passed() && report.worst() < GRADCHECK_TOLERANCE && elapsed < GRADCHECK_BUDGET,
        format!(
            "{} cases, worst relative error {:.2e} (< {GRADCHECK_TOLERANCE:e}), {:.1}s (< {}s){}",
            report.cases.len(),
            report.worst(),
            elapsed.as_secs_f64(),
            GRADCHECK_BUDGET.as_secs(),
            if failures.is_empty() { String::new() } else { format!(", failing {failures:?}") }
        ),
    ))
}

fn residual_identity() -> anyhow::Result<Outcome> {
    let mut params = NetworkParams::standard(7);
    params.zero_offset_heads();
    let input = sphere_cloud(256, 1);
    let outputs = params.forward_points(input.points(), true)?;
    let expected: Vec<Point> = input.points().iter().flat_map(|p| [*p; 4]).collect();
    let bitwise = outputs.last().unwrap().iter().zip(&expected).all(|(a, b)| a.map(f64::to_bits) == b.map(f64::to_bits))
        && outputs.last().unwrap().len() == expected.len();

    let dir = tempfile::tempdir()?;
    let ckpt = dir.path().join("zero.ckpt");
    let cloud_in = dir.path().join("in.xyz");
    let cloud_out = dir.path().join("out.xyz");
    save_checkpoint(&params, &ckpt)?;
    let cloud = sphere_cloud(1000, 2);
    write_cloud(&cloud, &cloud_in, None)?;
    run_bin(&["upsample", "--checkpoint", path(&ckpt), "--input", path(&cloud_in), "--output", path(&cloud_out)])?;
    let up = read_cloud(&cloud_out, None)?;
    let cd = chamfer_distance(up.points(), cloud.points())?;
    Ok(outcome(
        bitwise && cd < IDENTITY_CD_TOL && up.len() == 4 * cloud.len(),
        format!("bitwise x4 duplication: {bitwise}; upsample CD to input {cd:.1e} (< {IDENTITY_CD_TOL:e}) over {} points", up.len()),
    ))
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn brute_cd(p: &[Point], q: &[Point]) -> f64 {
    let directed = |a: &[Point], b: &[Point]| {
        let mut total = 0.0;
        for x in a {
            let mut best = f64::INFINITY;
            for y in b {
                let d = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2);
                best = best.min(d);
            }
            total += best;
        }
        total / a.len() as f64
    };
    directed(p, q) + directed(q, p)
}

fn brute_hd(p: &[Point], q: &[Point]) -> f64 {
    let directed = |a: &[Point], b: &[Point]| {
        let mut worst: f64 = 0.0;
        for x in a {
            let mut best = f64::INFINITY;
            for y in b {
                best = best.min(((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt());
            }
            worst = worst.max(best);
        }
        worst
    };
    directed(p, q).max(directed(q, p))
}

/// A surface piece parametrized over the unit square. Periodic pieces accept
/// any `(u, v)`; the others are clamped to the square.
struct Piece<'a> {
    f: Box<dyn Fn(f64, f64) -> Point + 'a>,
    periodic: bool,
}

fn piece<'a>(periodic: bool, f: impl Fn(f64, f64) -> Point + 'a) -> Piece<'a> {
    Piece { f: Box::new(f), periodic }
}

/// Distance from `p` to a piece by a dense grid followed by a compass
/// search that halves its step only when no neighbor improves.
fn sampled_distance(p: &Point, piece: &Piece) -> f64 {
    const COARSE: usize = 48;
    let d = |u: f64, v: f64| {
        let (u, v) = if piece.periodic { (u, v) } else { (u.clamp(0.0, 1.0), v.clamp(0.0, 1.0)) };
        dist2(p, &(piece.f)(u, v))
    };
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=COARSE {
        for j in 0..=COARSE {
            let (u, v) = (i as f64 / COARSE as f64, j as f64 / COARSE as f64);
            let e = d(u, v);
            if e < best.0 {
                best = (e, u, v);
            }
        }
    }
    let mut h = 1.0 / COARSE as f64;
    while h > 1e-14 {
        let (e0, u0, v0) = best;
        for (du, dv) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let (u, v) = (u0 + h * du, v0 + h * dv);
            let e = d(u, v);
            if e < best.0 {
                best = (e, u, v);
            }
        }
        if best.0 >= e0 {
            h *= 0.5;
        }
    }
    best.0.sqrt()
}

fn analytic_patches(s: &AnalyticSurface) -> Vec<Piece<'static>> {
    use std::f64::consts::TAU;
    match *s {
        // Six cube faces pushed onto the sphere: no poles to stall on.
        AnalyticSurface::Sphere { radius } => (0..6)
            .map(|face| {
                piece(false, move |u, v| {
                    let mut c = [0.0; 3];
                    c[face / 2] = if face % 2 == 0 { -1.0 } else { 1.0 };
                    c[(face / 2 + 1) % 3] = 2.0 * u - 1.0;
                    c[(face / 2 + 2) % 3] = 2.0 * v - 1.0;
                    let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
                    c.map(|x| radius * x / n)
                })
            })
            .collect(),
        AnalyticSurface::Plane { half_x, half_y } => {
            vec![piece(false, move |u, v| [half_x * (2.0 * u - 1.0), half_y * (2.0 * v - 1.0), 0.0])]
        }
        AnalyticSurface::Torus { major, minor } => vec![piece(true, move |u, v| {
            let ring = major + minor * (TAU * v).cos();
            [ring * (TAU * u).cos(), ring * (TAU * u).sin(), minor * (TAU * v).sin()]
        })],
        AnalyticSurface::Box { half } => (0..6)
            .map(|face| {
                piece(false, move |u, v| {
                    let axis = face / 2;
                    let mut p = [0.0; 3];
                    p[axis] = if face % 2 == 0 { -half[axis] } else { half[axis] };
                    p[(axis + 1) % 3] = half[(axis + 1) % 3] * (2.0 * u - 1.0);
                    p[(axis + 2) % 3] = half[(axis + 2) % 3] * (2.0 * v - 1.0);
                    p
                })
            })
            .collect(),
    }
}

fn mesh_patches(m: &TriangleMesh) -> Vec<Piece<'_>> {
    (0..m.faces().len())
        .map(|f| {
            let [a, b, c] = m.triangle(f);
            // (u, v) -> a + u (b - a) + u v (c - b) covers the triangle.
            piece(false, move |u, v| std::array::from_fn(|d| a[d] + u * (b[d] - a[d]) + u * v * (c[d] - b[d])))
        })
        .collect()
}

fn sampled_p2f(points: &[Point], pieces: &[Piece]) -> f64 {
    points
        .iter()
        .map(|p| pieces.iter().map(|f| sampled_distance(p, f)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / points.len() as f64
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Point> {
    (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-spread..spread))).collect()
}

fn metric_oracles() -> anyhow::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (mut cd_err, mut hd_err, mut p2f_err, mut mesh_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let shapes = ["sphere", "torus", "box", "plane"];
    for trial in 0..METRIC_TRIALS {
        let (np, nq) = (rng.random_range(1..=METRIC_MAX_POINTS), rng.random_range(1..=METRIC_MAX_POINTS));
        let p = random_points(&mut rng, np, 1.5);
        let q = random_points(&mut rng, nq, 1.5);
        cd_err = cd_err.max((chamfer_distance(&p, &q)? - brute_cd(&p, &q)).abs());
        hd_err = hd_err.max((hausdorff_distance(&p, &q)? - brute_hd(&p, &q)).abs());

        // P2F on fewer points: each oracle distance is a refined grid search.
        let probe = &p[..p.len().min(8)];
        let surface = toy_surface(shapes[trial % shapes.len()])?;
        let got = point_to_surface(probe, &surface)?;
        let e = (got - sampled_p2f(probe, &analytic_patches(&surface))).abs();
        p2f_err = p2f_err.max(e);

        let verts = random_points(&mut rng, 5, 1.0);
        let mesh = TriangleMesh::new(verts, vec![[0, 1, 2], [0, 2, 3], [1, 3, 4], [2, 4, 0]])?;
        let got = point_to_surface(probe, &mesh)?;
        mesh_err = mesh_err.max((got - sampled_p2f(probe, &mesh_patches(&mesh))).abs());
    }
    // The evaluation entry point reports the same values after normalizing to
    // the ground truth's unit sphere.
    let gt = PointCloud::new(random_points(&mut rng, 150, 2.0))?;
    let pred = PointCloud::new(random_points(&mut rng, 90, 2.0))?;
    let m = evaluate(&pred, &gt, None)?;
    let (gt_n, n) = cascade_core::geometry::normalize_to_unit_sphere(&gt)?;
    let pred_n = pred.transformed(&n);
    let eval_err = (m.cd - brute_cd(pred_n.points(), gt_n.points()))
        .abs()
        .max((m.hd - brute_hd(pred_n.points(), gt_n.points())).abs());
    let pass = cd_err < METRIC_TOL && hd_err < METRIC_TOL && p2f_err < METRIC_TOL && eval_err < METRIC_TOL && mesh_err < MESH_P2F_TOL;
    Ok(outcome(
        pass,
        format!(
            "{METRIC_TRIALS} trials, max |error| CD {cd_err:.1e}, HD {hd_err:.1e}, analytic P2F {p2f_err:.1e}, evaluate {eval_err:.1e} (< {METRIC_TOL:e}); mesh P2F {mesh_err:.1e} (< {MESH_P2F_TOL:e})"
        ),
    ))
}

fn count_contract() -> anyhow::Result<Outcome> {
    let params = NetworkParams::standard(3);
    let input = sphere_cloud(256, 5);
    let sizes: Vec<usize> = params.forward_points(input.points(), true)?.iter().map(Vec::len).collect();

    let dir = tempfile::tempdir()?;
    let ckpt = dir.path().join("net.ckpt");
    save_checkpoint(&params, &ckpt)?;
    let cloud = sphere_cloud(300, 6);
    let cin = dir.path().join("in.xyz");
    write_cloud(&cloud, &cin, None)?;
    let mut counts = Vec::new();
    for rate in ["4", "16"] {
        let cout = dir.path().join(format!("out{rate}.ply"));
        run_bin(&["upsample", "--checkpoint", path(&ckpt), "--input", path(&cin), "--output", path(&cout), "--rate", rate])?;
        counts.push(read_cloud(&cout, None)?.len());
    }
    let direct = upsample_cloud(&cloud, &params, 16, true)?.len();
    Ok(outcome(
        sizes == [512, 1024, 1024] && counts == [1200, 4800] && direct == 4800,
        format!("stage sizes {sizes:?} for 256 points; upsample of 300 points: --rate 4 -> {}, --rate 16 -> {}", counts[0], counts[1]),
    ))
}

/// The desk-scale setup: three analytic shapes, 64 patches of 1024 points
/// each, 256 -> 1024 training pairs.
fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset = "toy://sphere,torus,box".into();
    cfg.toy_points = 8192;
    cfg.patches_per_shape = 64;
    cfg.epochs = 20;
    cfg.batch_size = 2;
    cfg.decay_interval = None;
    cfg.seed = 0;
    cfg.threads = 1;
    cfg
}

fn desk_scale_training() -> anyhow::Result<Outcome> {
    let cfg = desk_config();
    let dataset = load_dataset(&cfg)?;
    let start = Instant::now();
    let (params, report) = train_run(&cfg, &dataset, None, |e| {
        eprintln!("  epoch {:>2}: refined CD {:.4e} ({:.0}s)", e.epoch, e.stage_losses.last().unwrap(), e.seconds)
    })?;
    let elapsed = start.elapsed();
    let curve = report.final_stage_curve();
    let ratio = curve.last().unwrap() / curve[0];
    let shapes = held_out_for(&cfg)?;
    let score = score_held_out(&params, &shapes, 4, true, &cfg.upsample_options())?;
    let per_shape: Vec<String> = score
        .shapes
        .iter()
        .map(|s| format!("{} {:.2}x", s.name, s.baseline_cd / s.model_cd))
        .collect();
    Ok(outcome(
        elapsed <= TRAIN_BUDGET && ratio <= TRAIN_LOSS_RATIO && score.improvement() >= HELD_OUT_IMPROVEMENT,
        format!(
            "{} epochs on {} patches in {:.0}s; final/epoch-1 refined CD {ratio:.3} (<= {TRAIN_LOSS_RATIO}); held-out CD {:.3e} vs baseline {:.3e}: {:.2}x (>= {HELD_OUT_IMPROVEMENT}) [{}]",
            cfg.epochs,
            dataset.len(),
            elapsed.as_secs_f64(),
            score.mean_model_cd(),
            score.mean_baseline_cd(),
            score.improvement(),
            per_shape.join(", ")
        ),
    ))
}

fn ablation_directions() -> anyhow::Result<Outcome> {
    let mut cfg = desk_config();
    cfg.patches_per_shape = 16;
    cfg.epochs = 12;
    let results = run_studies(&cfg, &Study::ALL, |m| eprintln!("  {m}"))?;
    let lines: Vec<String> = results
        .iter()
        .map(|r| {
            format!(
                "{}: {} {:.3e} vs {} {:.3e} {}",
                r.study.name(),
                r.better.label,
                r.better.held_out_cd,
                r.worse.label,
                r.worse.held_out_cd,
                r.verdict.name()
            )
        })
        .collect();
    Ok(outcome(results.iter().all(|r| r.verdict != Verdict::Reversed), lines.join("; ")))
}

fn determinism() -> anyhow::Result<Outcome> {
    let mut cfg = RunConfig::default();
    cfg.dataset = "toy://sphere,torus".into();
    cfg.toy_points = 2048;
    cfg.patches_per_shape = 4;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.threads = 1;
    cfg.seed = 11;
    let dataset = load_dataset(&cfg)?;
    let a = write_checkpoint(&train_run(&cfg, &dataset, None, |_| {})?.0);
    let b = write_checkpoint(&train_run(&cfg, &load_dataset(&cfg)?, None, |_| {})?.0);
    let same_ckpt = a == b;

    // A lattice is full of equidistant ties; both kNN paths and repeated
    // FPS runs must resolve them identically, toward the lower index.
    let lattice: Vec<Point> = (0..1000).map(|i| [(i % 10) as f64, ((i / 10) % 10) as f64, (i / 100) as f64]).collect();
    let tree = knn_indices(&lattice, &lattice, 7)?;
    let brute = knn_brute_force(&lattice, &lattice, 7)?;
    let center = 555;
    let row = tree.row(center);
    let knn_ties = tree == brute && row == [555, 455, 545, 554, 556, 565, 655];
    let f1 = farthest_point_sample(&lattice, 50, 0)?;
    let f2 = farthest_point_sample(&lattice, 50, 0)?;
    let fps_ties = f1 == f2 && f1[1] == 999;
    Ok(outcome(
        same_ckpt && knn_ties && fps_ties,
        format!(
            "identical checkpoints: {same_ckpt} ({} bytes); kNN tree == brute force with low-index ties: {knn_ties}; FPS repeatable with low-index ties: {fps_ties}",
            a.len()
        ),
    ))
}

fn permutation_equivariance() -> anyhow::Result<Outcome> {
    let params = NetworkParams::standard(5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let input = sphere_cloud(256, 9).into_points();
    let mut perm: Vec<usize> = (0..input.len()).collect();
    perm.shuffle(&mut rng);
    let permuted: Vec<Point> = perm.iter().map(|&i| input[i]).collect();
    let a = params.forward_points(&input, true)?;
    let b = params.forward_points(&permuted, true)?;
    let mut worst: f64 = 0.0;
    let mut bijective = true;
    for (sa, sb) in a.iter().zip(&b) {
        let r = sa.len() / input.len();
        // Output rows r*i .. r*i + r belong to input point i.
        for (pi, &orig) in perm.iter().enumerate() {
            let from_b = &sb[pi * r..pi * r + r];
            let from_a = &sa[orig * r..orig * r + r];
            let mut used = vec![false; r];
            for x in from_b {
                let (j, d) = from_a
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| !used[*j])
                    .map(|(j, y)| (j, dist2(x, y).sqrt()))
                    .min_by(|u, v| u.1.total_cmp(&v.1))
                    .expect("unused match");
                used[j] = true;
                worst = worst.max(d);
            }
            bijective &= used.iter().all(|u| *u);
        }
    }
    Ok(outcome(
        bijective && worst < EQUIVARIANCE_TOL,
        format!("max matched-point deviation {worst:.1e} (< {EQUIVARIANCE_TOL:e}) across {} stage outputs", a.len()),
    ))
}
