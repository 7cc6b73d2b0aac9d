//! Property tests for the invariants the library promises.

use cascade_core::geometry::{
    chamfer_distance, dist2, farthest_point_sample, hausdorff_distance, knn_brute_force, knn_indices, normalize_to_unit_sphere,
    Point, PointCloud,
};
use cascade_core::network::{ChannelPlan, NetworkParams, StageConfig};
use cascade_core::pipeline::{extract_covering_patches, read_cloud, write_cloud, CloudFormat};
use cascade_core::{Tape, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Point> {
    [-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64]
}

/// Coordinates on a coarse integer lattice, so distance ties are common.
fn lattice_point() -> impl Strategy<Value = Point> {
    [-3i32..4, -3i32..4, -3i32..4].prop_map(|c| c.map(f64::from))
}

fn tiny_plan() -> ChannelPlan {
    ChannelPlan {
        point_mlp: [4, 5],
        fuse_mlp: [6, 5],
        attention: 3,
        expand_reduce: 2,
        expand_mlp: [6, 5],
        offset_hidden: 4,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_paths_agree_including_ties(cloud in vec(lattice_point(), 1..400), k in 1usize..9) {
        let k = k.min(cloud.len());
        let fast = knn_indices(&cloud, &cloud, k).unwrap();
        let slow = knn_brute_force(&cloud, &cloud, k).unwrap();
        prop_assert_eq!(&fast, &slow);
        for q in 0..cloud.len() {
            let row = fast.row(q);
            for w in row.windows(2) {
                let (a, b) = (dist2(&cloud[q], &cloud[w[0]]), dist2(&cloud[q], &cloud[w[1]]));
                prop_assert!(a < b || (a == b && w[0] < w[1]));
            }
        }
    }

    #[test]
    fn fps_picks_distinct_indices_starting_at_seed(cloud in vec(point(), 1..200), frac in 0.0..1.0f64, seed in any::<prop::sample::Index>()) {
        let m = 1 + ((cloud.len() - 1) as f64 * frac) as usize;
        let s = seed.index(cloud.len());
        let picks = farthest_point_sample(&cloud, m, s).unwrap();
        prop_assert_eq!(picks.len(), m);
        prop_assert_eq!(picks[0], s);
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), m);
    }

    #[test]
    fn chamfer_is_symmetric_and_zero_on_itself(p in vec(point(), 1..60), q in vec(point(), 1..60)) {
        let pq = chamfer_distance(&p, &q).unwrap();
        prop_assert!(pq >= 0.0);
        prop_assert_eq!(pq, chamfer_distance(&q, &p).unwrap());
        prop_assert_eq!(chamfer_distance(&p, &p).unwrap(), 0.0);
        // Every nearest squared distance is at most HD squared.
        let hd = hausdorff_distance(&p, &q).unwrap();
        prop_assert!(pq <= 2.0 * hd * hd * (1.0 + 1e-12));
    }

    #[test]
    fn normalization_round_trips(cloud in vec(point(), 1..80)) {
        let c = PointCloud::new(cloud.clone()).unwrap();
        let (n, record) = normalize_to_unit_sphere(&c).unwrap();
        let max_norm = n.points().iter().map(|p| dist2(p, &[0.0; 3]).sqrt()).fold(0.0, f64::max);
        prop_assert!(max_norm <= 1.0 + 1e-12);
        for (a, b) in n.points().iter().zip(&cloud) {
            prop_assert!(dist2(&record.invert(a), b).sqrt() <= 1e-9 * (1.0 + record.scale));
        }
    }

    #[test]
    fn covering_patches_cover_every_point(cloud in vec(point(), 8..300), ps in 4usize..40) {
        let ps = ps.min(cloud.len());
        let c = PointCloud::new(cloud.clone()).unwrap();
        let set = extract_covering_patches(&c, None, ps).unwrap();
        let mut seen = vec![false; cloud.len()];
        for patch in &set.patches {
            prop_assert_eq!(patch.indices.len(), ps);
            for &i in &patch.indices {
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn xyz_and_ply_round_trip_bitwise(cloud in vec(point(), 1..50)) {
        let dir = tempfile::tempdir().unwrap();
        let c = PointCloud::new(cloud).unwrap();
        for (name, fmt) in [("a.xyz", CloudFormat::Xyz), ("a.ply", CloudFormat::Ply), ("b.ply", CloudFormat::PlyBinary)] {
            let path = dir.path().join(name);
            write_cloud(&c, &path, Some(fmt)).unwrap();
            let back = read_cloud(&path, Some(fmt)).unwrap();
            prop_assert_eq!(back.points(), c.points());
        }
    }

    #[test]
    fn gradients_off_the_loss_path_are_zero(x in vec(-2.0..2.0f64, 6), y in vec(-2.0..2.0f64, 6)) {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new(vec![2, 3], x).unwrap());
        let b = tape.param(Tensor::new(vec![2, 3], y).unwrap());
        let unused = tape.relu(b);
        let _ = tape.sum(unused);
        let loss = tape.sum(a);
        tape.backward(loss).unwrap();
        prop_assert!(tape.grad_tensor(b).data().iter().all(|g| *g == 0.0));
        prop_assert!(tape.grad_tensor(a).data().iter().all(|g| *g == 1.0));
    }

    #[test]
    fn linear_matches_triple_loop(n in 1usize..5, cin in 1usize..5, cout in 1usize..5, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (xd, wd, bd) = (draw(n * cin), draw(cin * cout), draw(cout));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![n, cin], xd.clone()).unwrap());
        let w = tape.constant(Tensor::new(vec![cin, cout], wd.clone()).unwrap());
        let b = tape.constant(Tensor::new(vec![cout], bd.clone()).unwrap());
        let out = tape.linear(x, w, b).unwrap();
        let got = tape.value(out).data();
        for i in 0..n {
            for j in 0..cout {
                let mut s = bd[j];
                for c in 0..cin {
                    s += xd[i * cin + c] * wd[c * cout + j];
                }
                prop_assert!((got[i * cout + j] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn stage_outputs_follow_the_rate_plan(n in 4usize..24, seed in any::<u64>()) {
        let mut configs = StageConfig::standard_cascade();
        for c in &mut configs {
            c.k_attention = 4;
        }
        let params = NetworkParams::init(tiny_plan(), &configs, seed).unwrap();
        let pts: Vec<Point> = (0..n).map(|i| [i as f64, (i * i % 7) as f64, (i % 3) as f64 * 0.5]).collect();
        let outs = params.forward_points(&pts, true).unwrap();
        let sizes: Vec<usize> = outs.iter().map(Vec::len).collect();
        prop_assert_eq!(sizes, vec![2 * n, 4 * n, 4 * n]);
        prop_assert!(outs.iter().flatten().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn parameter_count_depends_only_on_plan_and_rates(a in any::<u64>(), b in any::<u64>()) {
        let configs = StageConfig::standard_cascade();
        let pa = NetworkParams::init(ChannelPlan::default(), &configs, a).unwrap();
        let pb = NetworkParams::init(ChannelPlan::default(), &configs, b).unwrap();
        prop_assert_eq!(pa.count_parameters(), pb.count_parameters());
        prop_assert_eq!(pa.count_parameters(), 653_609);
    }
}
