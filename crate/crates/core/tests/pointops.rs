use pcomplete::config::ModelConfig;
use pcomplete::nn::Mlp;
use pcomplete::pointops::{fps, knn, knn_with, min_dist_to_set, EdgeConv, EdgeSpace, Search, SetAbstraction};
use pcomplete::PointCloud;
use pcomplete_tensor::{ParamStore, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_cloud(n: usize, seed: u64) -> PointCloud<f64> {
    let mut r = rng(seed);
    PointCloud::new((0..n).map(|_| [0; 3].map(|_| r.gen_range(-0.5..0.5))).collect()).unwrap()
}

fn d2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Straight-line greedy farthest point sampling.
fn fps_oracle(c: &PointCloud<f64>, m: usize) -> Vec<usize> {
    let pts = c.points();
    let mut start = 0;
    for i in 1..pts.len() {
        if pts[i] < pts[start] {
            start = i;
        }
    }
    let mut sel = vec![start];
    while sel.len() < m {
        let mut best = None;
        let mut best_d = -1.0;
        for i in 0..pts.len() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel.iter().map(|&s| d2(pts[i], pts[s])).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        sel.push(best.unwrap());
    }
    sel
}

/// Full sort of `(d², id)` per query.
fn knn_oracle(q: &PointCloud<f64>, r: &PointCloud<f64>, k: usize) -> Vec<Vec<usize>> {
    q.points()
        .iter()
        .map(|&p| {
            let mut all: Vec<(f64, usize)> = r.points().iter().enumerate().map(|(j, &x)| (d2(p, x), j)).collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            all.iter().take(k).map(|e| e.1).collect()
        })
        .collect()
}

#[test]
fn fps_square_corners_takes_the_far_corner() {
    let c = PointCloud::<f64>::from_f64(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 1.0, 0.0]]).unwrap();
    assert_eq!(fps(&c, 2).unwrap(), vec![2, 3]);
}

#[test]
fn fps_full_selection_is_a_permutation() {
    let c = random_cloud(40, 1);
    let mut idx = fps(&c, 40).unwrap();
    idx.sort_unstable();
    assert_eq!(idx, (0..40).collect::<Vec<_>>());
}

#[test]
fn fps_matches_greedy_resimulation() {
    for seed in 0..10 {
        let c = random_cloud(64, seed);
        assert_eq!(fps(&c, 16).unwrap(), fps_oracle(&c, 16));
    }
}

#[test]
fn fps_rejects_bad_counts() {
    let c = random_cloud(4, 0);
    assert!(fps(&c, 0).is_err());
    assert!(fps(&c, 5).is_err());
}

#[test]
fn knn_self_query_finds_itself() {
    let c = random_cloud(30, 2);
    let nb = knn(&c, &c, 1).unwrap();
    for i in 0..30 {
        assert_eq!(nb.row(i), &[i]);
        assert_eq!(nb.row_distances(i), &[0.0]);
    }
}

#[test]
fn knn_collinear_example() {
    let r = PointCloud::<f64>::from_f64(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
    let q = PointCloud::<f64>::from_f64(&[[0.0, 0.0, 0.0]]).unwrap();
    let nb = knn(&q, &r, 2).unwrap();
    assert_eq!(nb.row(0), &[0, 1]);
    assert_eq!(nb.row_distances(0), &[0.0, 1.0]);
}

#[test]
fn knn_pads_with_nearest_and_breaks_ties_by_index() {
    let r = PointCloud::<f64>::from_f64(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap();
    let q = PointCloud::<f64>::from_f64(&[[0.0, 0.0, 0.0]]).unwrap();
    let nb = knn(&q, &r, 4).unwrap();
    assert_eq!(nb.row(0), &[0, 1, 0, 0]);
}

#[test]
fn knn_matches_quadratic_scan() {
    let c = random_cloud(256, 3);
    let nb = knn(&c, &c, 8).unwrap();
    let oracle = knn_oracle(&c, &c, 8);
    for i in 0..256 {
        assert_eq!(nb.row(i), &oracle[i][..]);
        assert!(nb.row_distances(i).windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn min_dist_examples() {
    let x = PointCloud::<f64>::from_f64(&[[1.0, 0.0, 0.0]]).unwrap();
    let y = PointCloud::<f64>::from_f64(&[[0.0, 0.0, 0.0]]).unwrap();
    assert_eq!(min_dist_to_set(&x, &y).unwrap(), vec![1.0]);
    let c = random_cloud(50, 4);
    let sub = c.select(&[3, 7, 11]);
    assert_eq!(min_dist_to_set(&sub, &c).unwrap(), vec![0.0; 3]);
}

#[test]
fn min_dist_matches_pairwise_column_min() {
    let x = random_cloud(100, 5);
    let y = random_cloud(80, 6);
    let got = min_dist_to_set(&x, &y).unwrap();
    for (i, &p) in x.points().iter().enumerate() {
        let want = y.points().iter().map(|&q| d2(p, q).sqrt()).fold(f64::INFINITY, f64::min);
        assert!((got[i] - want).abs() < 1e-7);
    }
}

fn pcn_encoder(store: &mut ParamStore<f64>) -> Vec<SetAbstraction> {
    let cfg = ModelConfig::pcn();
    let mut r = rng(9);
    let mut width = 0;
    cfg.point_encoder
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let sa = SetAbstraction::new(store, &format!("sa{i}"), width, &l.widths, l.centroids, l.k, &mut r).unwrap();
            width = sa.out_width();
            sa
        })
        .collect()
}

#[test]
fn set_abstraction_stack_shapes() {
    let mut store = ParamStore::new();
    let layers = pcn_encoder(&mut store);
    let cloud = random_cloud(2048, 7);
    let mut tape = Tape::with_params(&store);
    let mut pts = cloud;
    let mut f = None;
    let mut shapes = Vec::new();
    for l in &layers {
        let (c, nf) = l.forward(&mut tape, &pts, f).unwrap();
        shapes.push(tape.shape(nf).to_vec());
        pts = c;
        f = Some(nf);
    }
    assert_eq!(shapes, vec![vec![512, 128], vec![128, 256], vec![1, 256]]);
}

#[test]
fn global_set_abstraction_of_single_point() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(10);
    let sa = SetAbstraction::new(&mut store, "g", 2, &[5, 4], None, 0, &mut r).unwrap();
    let cloud = PointCloud::<f64>::from_f64(&[[0.0, 0.0, 0.0]]).unwrap();
    let mut tape = Tape::with_params(&store);
    let feat = tape.constant(pcomplete_tensor::Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap());
    let (_, out) = sa.forward(&mut tape, &cloud, Some(feat)).unwrap();
    let zin = tape.constant(pcomplete_tensor::Tensor::new(&[1, 5], vec![0.0, 0.0, 0.0, 0.3, -0.7]).unwrap());
    let direct = sa.mlp.forward(&mut tape, zin).unwrap();
    assert_eq!(tape.value(out).data(), tape.value(direct).data());
}

#[test]
fn set_abstraction_is_permutation_invariant() {
    let mut store = ParamStore::new();
    let layers = pcn_encoder(&mut store);
    let cloud = random_cloud(2048, 11);
    let mut perm: Vec<usize> = (0..2048).collect();
    perm.reverse();
    perm.rotate_left(100);
    let shuffled = cloud.select(&perm);
    let run = |c: &PointCloud<f64>| {
        let mut tape = Tape::with_params(&store);
        let mut pts = c.clone();
        let mut f = None;
        for l in &layers {
            let (nc, nf) = l.forward(&mut tape, &pts, f).unwrap();
            pts = nc;
            f = Some(nf);
        }
        tape.value(f.unwrap()).clone()
    };
    assert!(run(&cloud).max_abs_diff(&run(&shuffled)) <= 1e-5);
}

#[test]
fn edgeconv_identical_points_is_pointwise_mlp_of_zero_edges() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(12);
    let ec = EdgeConv::new(&mut store, "e", &[3, 8], 4, EdgeSpace::Coordinates, &mut r).unwrap();
    let cloud = PointCloud::<f64>::from_f64(&[[0.1, 0.2, 0.3]; 6]).unwrap();
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(cloud.to_tensor());
    let out = ec.forward(&mut tape, &cloud, x).unwrap();
    let zin = tape.constant(pcomplete_tensor::Tensor::new(&[1, 6], vec![0.1, 0.2, 0.3, 0.0, 0.0, 0.0]).unwrap());
    let want = ec.mlp.forward(&mut tape, zin).unwrap();
    for i in 0..6 {
        assert_eq!(tape.value(out).row(i), tape.value(want).row(0));
    }
}

#[test]
fn edgeconv_with_k1_equals_pointwise_mlp() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(13);
    let ec = EdgeConv::new(&mut store, "e", &[3, 8, 5], 1, EdgeSpace::Features, &mut r).unwrap();
    let cloud = random_cloud(20, 14);
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(cloud.to_tensor());
    let out = ec.forward(&mut tape, &cloud, x).unwrap();
    let zeros = tape.constant(pcomplete_tensor::Tensor::zeros(&[20, 3]));
    let edge = tape.concat(&[x, zeros], 1).unwrap();
    let want = Mlp::forward(&ec.mlp, &mut tape, edge).unwrap();
    assert_eq!(tape.value(out).data(), tape.value(want).data());
}

#[test]
fn partial_feature_shape_contract() {
    let cfg = ModelConfig::pcn();
    let mut store = ParamStore::<f32>::new();
    let mut r = rng(15);
    let pf = pcomplete::refine::PartialFeatures::new(&mut store, &cfg, &mut r).unwrap();
    let cloud: PointCloud<f32> = random_cloud(2048, 16).cast();
    let mut tape = Tape::with_params(&store);
    let out = pf.forward(&mut tape, &cloud).unwrap();
    assert_eq!(tape.shape(out.features), &[512, 256]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grid_search_agrees_with_brute_force(seed in 0u64..1000, n in 1usize..300, k in 1usize..12, flat in any::<bool>()) {
        let mut c = random_cloud(n, seed);
        if flat {
            c = c.map(|p| [p[0], p[1], 0.0]);
        }
        let q = random_cloud(40, seed + 1);
        let a = knn_with(&q, &c, k, Search::Brute).unwrap();
        let b = knn_with(&q, &c, k, Search::Grid).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn fps_is_a_duplicate_free_subset(seed in 0u64..1000, n in 1usize..100, frac in 0.01f64..1.0) {
        let c = random_cloud(n, seed);
        let m = ((n as f64 * frac).ceil() as usize).clamp(1, n);
        let mut idx = fps(&c, m).unwrap();
        prop_assert_eq!(idx.len(), m);
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), m);
        prop_assert!(idx.iter().all(|&i| i < n));
    }

    #[test]
    fn knn_rows_are_sorted_and_in_range(seed in 0u64..1000, n in 1usize..120, k in 1usize..20) {
        let c = random_cloud(n, seed);
        let nb = knn(&c, &c, k).unwrap();
        for i in 0..n {
            let d = nb.row_distances(i);
            let real = k.min(n);
            prop_assert!(d[..real].windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(d[real..].iter().all(|&x| x == d[0]));
            prop_assert!(nb.row(i).iter().all(|&j| j < n));
        }
    }
}
