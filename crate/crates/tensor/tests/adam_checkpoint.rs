use pcomplete_tensor::{AdamState, Checkpoint, ParamStore, Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    let mut store = ParamStore::<f32>::new();
    let id = store.register("w", Tensor::from_vec(vec![0.3, -0.7, 1.1])).unwrap();
    let before = store.get(id).data().to_vec();
    let mut adam = AdamState::new(&store, 1e-3);
    store.accumulate_grad(id, &[0.0, 0.0, 0.0]);
    adam.step(&mut store).unwrap();
    assert_eq!(store.get(id).data(), &before[..]);
    assert_eq!(adam.steps(), 1);
}

#[test]
fn first_step_with_unit_gradient_moves_by_lr() {
    let mut store = ParamStore::<f64>::new();
    let id = store.register("w", Tensor::from_vec(vec![0.5, -2.0, 7.0])).unwrap();
    let mut adam = AdamState::new(&store, 0.001);
    store.accumulate_grad(id, &[1.0, 1.0, 1.0]);
    adam.step(&mut store).unwrap();
    let expected_step = 0.001 / (1.0 + 1e-8);
    for (now, was) in store.get(id).data().iter().zip([0.5, -2.0, 7.0]) {
        assert!((was - now - expected_step).abs() < 1e-12);
    }
}

#[test]
fn missing_gradient_is_an_error() {
    let mut store = ParamStore::<f32>::new();
    let a = store.register("a", Tensor::from_vec(vec![1.0])).unwrap();
    store.register("b", Tensor::from_vec(vec![1.0])).unwrap();
    store.accumulate_grad(a, &[1.0]);
    let mut adam = AdamState::new(&store, 0.1);
    let err = adam.step(&mut store).unwrap_err();
    assert!(matches!(err, TensorError::MissingGrad(ref n) if n == "b"));
    assert_eq!(store.get(a).data(), &[1.0]);
    assert_eq!(adam.steps(), 0);
}

#[test]
fn converges_on_squared_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::<f64>::new();
    let x = store.register("x", Tensor::uniform(&[3], -1.0, 1.0, &mut rng)).unwrap();
    let mut adam = AdamState::new(&store, 0.05);
    for _ in 0..200 {
        store.zero_grad();
        let grads = {
            let mut tape = Tape::with_params(&store);
            let xv = tape.param(x);
            let sq = tape.mul(xv, xv).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap()
        };
        grads.accumulate_into(&mut store);
        adam.step(&mut store).unwrap();
    }
    let norm = store.get(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 0.05, "{norm}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f32>::new();
    store.register("enc.w", Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng)).unwrap();
    store.register("enc.b", Tensor::uniform(&[3], -1.0, 1.0, &mut rng)).unwrap();
    store.register("odd", Tensor::new(&[2], vec![f32::MIN_POSITIVE, -0.0]).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    Checkpoint::from_params(&store).save(dir.path()).unwrap();

    let loaded = Checkpoint::load(dir.path()).unwrap();
    let manifest = loaded.manifest();
    assert_eq!(manifest[1].offset, 48);
    assert_eq!(manifest[1].len_bytes, 12);
    assert_eq!(manifest[2].dtype, "f32le");

    let mut other = ParamStore::<f32>::new();
    other.register("enc.w", Tensor::zeros(&[4, 3])).unwrap();
    other.register("enc.b", Tensor::zeros(&[3])).unwrap();
    other.register("odd", Tensor::zeros(&[2])).unwrap();
    loaded.restore_params(&mut other).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(other.iter()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }

    let mut wrong = ParamStore::<f32>::new();
    wrong.register("enc.w", Tensor::zeros(&[3, 4])).unwrap();
    assert!(loaded.restore_params(&mut wrong).is_err());
    let mut missing = ParamStore::<f32>::new();
    missing.register("nope", Tensor::zeros(&[1])).unwrap();
    assert!(loaded.restore_params(&mut missing).is_err());
}

#[test]
fn manifest_is_plain_json_array() {
    let mut store = ParamStore::<f32>::new();
    store.register("a", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    Checkpoint::from_params(&store).save(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(
        v,
        serde_json::json!([{"name": "a", "shape": [2], "dtype": "f32le", "offset": 0, "len_bytes": 8}])
    );
    let bytes = std::fs::read(dir.path().join("weights.bin")).unwrap();
    assert_eq!(bytes, [1.0f32.to_le_bytes(), 2.0f32.to_le_bytes()].concat());
}

#[test]
fn optimizer_state_round_trips() {
    let mut store = ParamStore::<f32>::new();
    let id = store.register("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let mut adam = AdamState::new(&store, 0.01);
    store.accumulate_grad(id, &[0.5, -0.25]);
    adam.step(&mut store).unwrap();

    let mut ck = Checkpoint::from_params(&store);
    for (name, t) in adam.export(&store) {
        ck.push(name, &t);
    }
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let loaded = Checkpoint::load(dir.path()).unwrap();
    let mut fresh = AdamState::new(&store, 0.01);
    fresh.import(&store, |n| loaded.get(n).cloned()).unwrap();
    assert_eq!(fresh.steps(), 1);

    let mut s1 = store.clone();
    let mut s2 = store.clone();
    s1.zero_grad();
    s2.zero_grad();
    s1.accumulate_grad(id, &[0.1, 0.2]);
    s2.accumulate_grad(id, &[0.1, 0.2]);
    adam.step(&mut s1).unwrap();
    fresh.step(&mut s2).unwrap();
    assert_eq!(s1.get(id).data(), s2.get(id).data());
}

proptest! {
    #[test]
    fn checkpoint_preserves_arbitrary_bits(bits in prop::collection::vec(any::<u32>(), 1..40)) {
        let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
        let mut ck = Checkpoint::new();
        ck.push("t", &Tensor::from_vec(data));
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        let got: Vec<u32> = back.get("t").unwrap().data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, bits);
    }
}
