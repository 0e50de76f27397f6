use pcomplete::config::ModelConfig;
use pcomplete::refine::{
    apply_offsets, incompleteness_embedding, incompleteness_positions, OffsetHead, RefineStage, SimilarityAlignment,
    StructureAnalysis,
};
use pcomplete::PointCloud;
use pcomplete_tensor::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn random_cloud(n: usize, seed: u64) -> PointCloud<f64> {
    let mut r = rng(seed);
    PointCloud::new((0..n).map(|_| [0; 3].map(|_| r.gen_range(-0.5..0.5))).collect()).unwrap()
}

#[test]
fn embedding_of_points_on_the_input_alternates_zero_one() {
    let partial = random_cloud(30, 1);
    let mut tape = Tape::<f64>::new();
    let h = incompleteness_embedding(&mut tape, &partial, &partial, 0.2, 8).unwrap();
    assert_eq!(tape.shape(h), &[30, 8]);
    for r in 0..30 {
        assert_eq!(tape.value(h).row(r), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }
}

#[test]
fn embedding_first_channel_is_sine_of_scaled_distance() {
    let partial = PointCloud::<f64>::from_f64(&[[0.0, 0.0, 0.0]]).unwrap();
    let coarse = PointCloud::<f64>::from_f64(&[[0.2, 0.0, 0.0]]).unwrap();
    let mut tape = Tape::<f64>::new();
    let h = incompleteness_embedding(&mut tape, &coarse, &partial, 0.2, 4).unwrap();
    let row = tape.value(h).row(0);
    assert!((row[0] - 1f64.sin()).abs() < 1e-12);
    assert!((row[1] - 1f64.cos()).abs() < 1e-12);
}

#[test]
fn embedding_rejects_bad_arguments() {
    let c = random_cloud(4, 2);
    let mut tape = Tape::<f64>::new();
    assert!(incompleteness_embedding(&mut tape, &c, &c, 0.0, 4).is_err());
    assert!(incompleteness_embedding(&mut tape, &c, &c, 0.2, 5).is_err());
}

#[test]
fn positions_grow_with_distance_from_the_input() {
    let partial = PointCloud::<f64>::from_f64(&[[0.0, 0.0, 0.0], [0.0, 0.1, 0.0]]).unwrap();
    let coarse = PointCloud::<f64>::from_f64(&(0..10).map(|i| [0.05 * i as f64, 0.0, 0.0]).collect::<Vec<_>>()).unwrap();
    let p = incompleteness_positions(&coarse, &partial, 0.2).unwrap();
    assert!(p.windows(2).all(|w| w[0] < w[1]));
    assert!((p[4] - 1.0).abs() < 1e-12);
}

fn structure(store: &mut ParamStore<f64>) -> StructureAnalysis {
    StructureAnalysis::new(store, "s", 5, 8, &[6], false, &mut rng(3)).unwrap()
}

#[test]
fn single_point_attends_to_itself() {
    let mut store = ParamStore::new();
    let s = structure(&mut store);
    let mut tape = Tape::with_params(&store);
    let f = tape.constant(uniform(&[1, 8], 4));
    let h = tape.constant(uniform(&[1, 8], 5));
    let (raw, a) = s.attend(&mut tape, f, Some(h)).unwrap();
    assert_eq!(tape.value(a).data(), &[1.0]);
    let wv = tape.param(s.wv);
    let v = tape.matmul(f, wv).unwrap();
    assert_eq!(tape.value(raw).data(), tape.value(v).data());
}

#[test]
fn zero_embedding_matches_plain_self_attention_bitwise() {
    let mut store = ParamStore::new();
    let s = structure(&mut store);
    let mut tape = Tape::with_params(&store);
    let f = tape.constant(uniform(&[12, 8], 6));
    let h = tape.constant(Tensor::zeros(&[12, 8]));
    let (a, wa) = s.attend(&mut tape, f, Some(h)).unwrap();
    let (b, wb) = s.attend(&mut tape, f, None).unwrap();
    assert_eq!(tape.value(a).data(), tape.value(b).data());
    assert_eq!(tape.value(wa).data(), tape.value(wb).data());
}

#[test]
fn structure_forward_shapes_and_row_stochastic_map() {
    let mut store = ParamStore::new();
    let s = structure(&mut store);
    let mut tape = Tape::with_params(&store);
    let pts = tape.constant(random_cloud(10, 7).to_tensor());
    let g = tape.constant(uniform(&[1, 5], 8));
    let h = tape.constant(uniform(&[10, 8], 9));
    let out = s.forward(&mut tape, pts, g, h).unwrap();
    assert_eq!(tape.shape(out.raw), &[10, 8]);
    assert_eq!(tape.shape(out.decoded), &[10, 6]);
    assert_eq!(tape.shape(out.weights), &[10, 10]);
    for r in 0..10 {
        assert!((tape.value(out.weights).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let bad = tape.constant(uniform(&[9, 8], 10));
    assert!(s.forward(&mut tape, pts, g, bad).is_err());
}

#[test]
fn cross_attention_with_one_key_copies_its_value() {
    let mut store = ParamStore::new();
    let sim = SimilarityAlignment::new(&mut store, "a", 8, 4, &[6], false, &mut rng(11)).unwrap();
    let mut tape = Tape::with_params(&store);
    let q = tape.constant(uniform(&[7, 8], 12));
    let kv = tape.constant(uniform(&[1, 4], 13));
    let out = sim.forward(&mut tape, q, kv).unwrap();
    assert_eq!(tape.shape(out.weights), &[7, 1]);
    assert!(tape.value(out.weights).data().iter().all(|&w| w == 1.0));
    assert_eq!(tape.shape(out.decoded), &[7, 6]);

    let wide = tape.constant(uniform(&[5, 4], 14));
    let out = sim.forward(&mut tape, q, wide).unwrap();
    assert_eq!(tape.shape(out.weights), &[7, 5]);
    let narrow = tape.constant(uniform(&[5, 3], 15));
    assert!(sim.forward(&mut tape, q, narrow).is_err());
}

#[test]
fn zeroed_offset_head_predicts_no_motion() {
    let mut store = ParamStore::<f64>::new();
    let head = OffsetHead::new(&mut store, "o", 2 * 4 * 2, 4, 3, 2, &mut rng(16)).unwrap();
    let last = head.mlp.layers.last().unwrap().clone();
    store.get_mut(last.w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    store.get_mut(last.b.unwrap()).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut tape = Tape::with_params(&store);
    let s = tape.constant(uniform(&[6, 8], 17));
    let a = tape.constant(uniform(&[6, 8], 18));
    let off = head.forward(&mut tape, s, a).unwrap();
    assert_eq!(tape.shape(off), &[12, 3]);
    assert!(tape.value(off).data().iter().all(|&v| v == 0.0));
    let prev = tape.constant(random_cloud(6, 19).to_tensor());
    let next = apply_offsets(&mut tape, prev, off, 2).unwrap();
    for i in 0..12 {
        assert_eq!(tape.value(next).row(i), tape.value(prev).row(i / 2));
    }
}

#[test]
fn offsets_land_next_to_their_parent() {
    let mut tape = Tape::<f64>::new();
    let prev = tape.constant(Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
    let off = tape.constant(Tensor::new(&[4, 3], vec![0.1, 0.0, 0.0, -0.1, 0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.1]).unwrap());
    let next = apply_offsets(&mut tape, prev, off, 2).unwrap();
    assert_eq!(
        tape.value(next).data(),
        &[0.1, 0.0, 0.0, -0.1, 0.0, 0.0, 1.0, 1.1, 1.0, 1.0, 1.0, 1.1]
    );
    let short = tape.constant(Tensor::zeros(&[3, 3]));
    assert!(apply_offsets(&mut tape, prev, short, 2).is_err());
}

#[test]
fn pcn_offset_head_shape() {
    let cfg = ModelConfig::pcn();
    let mut store = ParamStore::<f32>::new();
    let stage = RefineStage::new(&mut store, &cfg, 0, &mut rng(20)).unwrap();
    let mut tape = Tape::with_params(&store);
    let w = cfg.offset_unit * cfg.rates[0];
    let s = tape.constant(Tensor::<f32>::zeros(&[128, w]));
    let off = stage.offsets.forward(&mut tape, s, s).unwrap();
    assert_eq!(tape.shape(off), &[512, 3]);
}

#[test]
fn stage_multiplies_cardinality_by_its_rate() {
    let cfg = ModelConfig::desk();
    let mut store = ParamStore::<f64>::new();
    let pf = pcomplete::refine::PartialFeatures::new(&mut store, &cfg, &mut rng(21)).unwrap();
    let stage = RefineStage::new(&mut store, &cfg, 1, &mut rng(22)).unwrap();
    let partial = random_cloud(cfg.n_in, 23);
    let mut tape = Tape::with_params(&store);
    let feats = pf.forward(&mut tape, &partial).unwrap();
    let prev = tape.constant(random_cloud(40, 24).to_tensor());
    let g = tape.constant(uniform(&[1, cfg.descriptor_width()], 25));
    let out = stage.forward(&mut tape, prev, &partial, feats.features, g).unwrap();
    assert_eq!(tape.shape(out.points), &[40 * cfg.rates[1], 3]);
    assert_eq!(tape.shape(out.structure_weights), &[40, 40]);
    assert_eq!(tape.shape(out.similarity_weights), &[40, cfg.partial_feature_rows()]);
    assert!(tape.value(out.points).all_finite());
}
