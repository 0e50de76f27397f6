use std::collections::BTreeMap;

use pcomplete::config::{Profile, RunConfig};
use pcomplete::data::{half_space_cut, read_dataset, synth_dataset, synth_pair, write_dataset, SynthOptions};
use pcomplete::metrics::{chamfer, ChamferVariant};
use pcomplete::train::{downsample_gt, partial_matching_loss, total_loss, StepRecord, Targets, Trainer};
use pcomplete::PointCloud;
use pcomplete_tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(n: usize, seed: u64) -> PointCloud<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new((0..n).map(|_| [0; 3].map(|_| r.gen_range(-0.5..0.5))).collect()).unwrap()
}

fn desk(overrides: &str) -> RunConfig {
    RunConfig::from_toml_str(&format!("profile = \"desk\"\n{overrides}")).unwrap()
}

#[test]
fn downsampled_targets_are_subsets_of_the_requested_size() {
    let gt = random_cloud(300, 1);
    let t = Targets::new(&gt, [50, 100, 300]).unwrap();
    for (c, n) in t.clouds.iter().zip([50, 100, 300]) {
        assert_eq!(c.len(), n);
        assert!(c.points().iter().all(|p| gt.points().contains(p)));
    }
    assert!(downsample_gt(&gt, 301).is_err());
}

#[test]
fn total_loss_is_zero_on_exact_targets() {
    let gt = random_cloud(64, 2);
    let t = Targets::new(&gt, [8, 16, 32]).unwrap();
    let mut tape = Tape::<f64>::new();
    let stages = [0, 1, 2].map(|i| tape.constant(t.clouds[i].to_tensor()));
    for v in [ChamferVariant::L1, ChamferVariant::L2] {
        let l = total_loss(&mut tape, stages, &t, v).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }
    let short = tape.constant(random_cloud(7, 3).to_tensor());
    assert!(total_loss(&mut tape, [short, stages[1], stages[2]], &t, ChamferVariant::L1).is_err());
}

#[test]
fn total_loss_matches_the_metric_sum() {
    let gt = random_cloud(64, 4);
    let t = Targets::new(&gt, [8, 16, 32]).unwrap();
    let preds = [random_cloud(8, 5), random_cloud(16, 6), random_cloud(32, 7)];
    for v in [ChamferVariant::L1, ChamferVariant::L2] {
        let mut tape = Tape::<f64>::new();
        let stages = [0, 1, 2].map(|i| tape.constant(preds[i].to_tensor()));
        let l = total_loss(&mut tape, stages, &t, v).unwrap();
        let want: f64 = (0..3).map(|i| chamfer(&preds[i], &t.clouds[i], v).unwrap()).sum();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }
}

#[test]
fn partial_matching_examples() {
    let partial = PointCloud::<f64>::from_f64(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
    let mut tape = Tape::<f64>::new();
    let covering = tape.constant(partial.concat(&random_cloud(5, 8)).to_tensor());
    let l = partial_matching_loss(&mut tape, covering, &partial).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    let shifted = tape.constant(PointCloud::<f64>::from_f64(&[[0.0, 0.3, 0.0]]).unwrap().to_tensor());
    let l = partial_matching_loss(&mut tape, shifted, &partial).unwrap();
    let want = 0.5 * (0.3 + (1.0f64 + 0.09).sqrt());
    assert!((tape.value(l).item() - want).abs() < 1e-12);
}

#[test]
fn synthetic_pairs_are_deterministic_and_consistent() {
    let opts = SynthOptions::default();
    let a = synth_pair::<f32>(11, 3, &opts).unwrap();
    let b = synth_pair::<f32>(11, 3, &opts).unwrap();
    assert_eq!(a.partial, b.partial);
    assert_eq!(a.complete, b.complete);
    let c = synth_pair::<f32>(11, 4, &opts).unwrap();
    assert_ne!(a.complete, c.complete);
    assert!(synth_dataset::<f32>(0, 1, &opts).is_err());
}

#[test]
fn thousand_pairs_keep_a_quarter_to_three_quarters() {
    let opts = SynthOptions {
        gt_points: 256,
        input_points: 128,
        half_extent: 0.5,
    };
    let mut cats = BTreeMap::new();
    for i in 0..1000 {
        let p = synth_pair::<f64>(5, i, &opts).unwrap();
        assert!((0.25..=0.75).contains(&p.kept), "pair {i} kept {}", p.kept);
        assert_eq!(p.partial.len(), 128);
        assert_eq!(p.complete.len(), 256);
        assert!(p.partial.points().iter().all(|q| p.complete.points().contains(q)));
        assert!(p.complete.points().iter().flatten().all(|c| c.abs() <= 0.5));
        *cats.entry(p.category.name()).or_insert(0) += 1;
    }
    assert_eq!(cats.len(), 4);
}

#[test]
fn half_space_cut_keeps_one_side() {
    let pts: Vec<[f64; 3]> = random_cloud(200, 9).points().to_vec();
    let mut r = ChaCha8Rng::seed_from_u64(10);
    let kept = half_space_cut(&pts, &mut r);
    assert!(kept.len() >= 50 && kept.len() <= 150);
    assert!(kept.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let opts = SynthOptions::default();
    let pairs = synth_dataset::<f32>(3, 21, &opts).unwrap();
    write_dataset(dir.path(), &pairs, 21, &opts).unwrap();
    assert!(dir.path().join("pairs/0002.partial.xyz").exists());
    assert!(dir.path().join("index.json").exists());
    let (index, back) = read_dataset::<f32>(dir.path()).unwrap();
    assert_eq!(index.seed, 21);
    assert_eq!(index.pairs.len(), 3);
    for (a, b) in pairs.iter().zip(&back) {
        assert_eq!(a.category, b.category);
        assert_eq!(a.complete.len(), b.complete.len());
        for (p, q) in a.complete.points().iter().zip(b.complete.points()) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() <= 1e-5 * p[k].abs().max(1e-3));
            }
        }
    }
}

#[test]
fn learning_rate_schedule_closed_form() {
    for profile in [Profile::Pcn, Profile::Shapenet55] {
        let t = profile.train();
        for epoch in [0, 1, 2, 39, 40, 41, 79, 80, 399] {
            let want = 1e-4 * t.decay.powf((epoch / t.decay_every) as f64);
            assert!((t.lr_at(epoch) - want).abs() <= 1e-18);
        }
    }
    let pcn = Profile::Pcn.train();
    assert_eq!(pcn.lr_at(39), 1e-4);
    assert!((pcn.lr_at(40) - 0.7e-4).abs() < 1e-18);
    let sn = Profile::Shapenet55.train();
    assert!((sn.lr_at(3) - 0.98e-4).abs() < 1e-18);
}

#[test]
fn csv_record_format() {
    let r = StepRecord {
        step: 3,
        loss: 0.5,
        lr: 1e-4,
    };
    assert_eq!(StepRecord::CSV_HEADER, "step,loss,lr");
    assert!(r.csv_line().starts_with("3,5.0"));
}

fn small_trainer(n: usize, overrides: &str) -> Trainer {
    let pairs = synth_dataset::<f32>(n, 7, &SynthOptions::default()).unwrap();
    Trainer::new(&desk(overrides), pairs).unwrap()
}

#[test]
fn one_step_moves_every_layer() {
    let mut t = small_trainer(1, "[train]\nbatch_size = 1");
    let before = t.params.clone();
    t.step().unwrap();
    let mut layers: BTreeMap<String, bool> = BTreeMap::new();
    for id in t.params.ids() {
        let name = t.params.name(id);
        let layer = name.rsplit_once('.').map_or(name, |(l, _)| l).to_string();
        let moved = t.params.get(id).data() != before.get(id).data();
        *layers.entry(layer).or_insert(false) |= moved;
    }
    let frozen: Vec<_> = layers.iter().filter(|(_, m)| !**m).map(|(l, _)| l).collect();
    assert!(frozen.is_empty(), "unchanged layers: {frozen:?}");
}

#[test]
fn traces_are_deterministic_and_resume_is_bit_exact() {
    let cfg = "[train]\nbatch_size = 1";
    let mut a = small_trainer(2, cfg);
    let first = a.step().unwrap();
    let ckpt = a.checkpoint();
    let second = a.step().unwrap();

    let mut b = small_trainer(2, cfg);
    assert_eq!(b.step().unwrap(), first);
    assert_eq!(b.step().unwrap(), second);

    let pairs = synth_dataset::<f32>(2, 7, &SynthOptions::default()).unwrap();
    let mut c = Trainer::resume(&desk(cfg), pairs, &ckpt).unwrap();
    assert_eq!(c.step, 1);
    assert_eq!(c.step().unwrap(), second);
    for id in a.params.ids() {
        assert_eq!(a.params.get(id).data(), c.params.get(id).data());
    }
}

#[test]
fn small_steps_decrease_a_single_pair_loss() {
    for lr in ["1e-4", "1e-5"] {
        let mut t = small_trainer(1, &format!("[train]\nbatch_size = 1\nlr = {lr}"));
        let before = t.evaluate_pair(0).unwrap();
        let r = t.step().unwrap();
        assert!((r.loss - before).abs() <= 1e-6 * before);
        let after = t.evaluate_pair(0).unwrap();
        assert!(after < before, "lr {lr}: {before} -> {after}");
    }
}
