use pcomplete::config::{ModelConfig, Profile, RunConfig};
use pcomplete::metrics::ChamferVariant;

#[test]
fn profiles_round_trip_through_toml() {
    for p in [Profile::Pcn, Profile::Shapenet55, Profile::Desk] {
        let cfg = RunConfig::from_profile(p);
        let text = cfg.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(p.name().parse::<Profile>().unwrap(), p);
    }
}

#[test]
fn overrides_merge_into_profile_defaults() {
    let cfg = RunConfig::from_toml_str(
        "profile = \"pcn\"\n[model]\ngamma = 0.5\n[train]\nlr = 3e-4\nsteps = 7\nloss = \"l2\"\n",
    )
    .unwrap();
    assert_eq!(cfg.profile, Profile::Pcn);
    assert_eq!(cfg.model.gamma, 0.5);
    assert_eq!(cfg.model.n0, 512);
    assert_eq!(cfg.train.lr, 3e-4);
    assert_eq!(cfg.train.steps, Some(7));
    assert_eq!(cfg.train.loss, ChamferVariant::L2);
    assert_eq!(cfg.train.batch_size, 12);
    assert_eq!(RunConfig::from_toml_str("").unwrap().profile, Profile::Desk);
}

#[test]
fn bad_configs_are_rejected() {
    for text in [
        "profile = \"nope\"",
        "[model]\nwidth = 3",
        "extra = 1",
        "[train]\nlr = -1.0",
        "[train]\nbatch_size = 0",
        "[model]\nrates = [0, 2]",
        "[model]\ngamma = 0.0",
        "[model]\nn0 = 1000",
        "this is not toml",
    ] {
        assert!(RunConfig::from_toml_str(text).is_err(), "accepted {text:?}");
    }
}

#[test]
fn profile_sizes() {
    assert_eq!(ModelConfig::pcn().output_sizes(), [512, 2048, 16384]);
    assert_eq!(ModelConfig::shapenet55().output_sizes(), [1024, 2048, 8192]);
    assert_eq!(ModelConfig::desk().output_sizes(), [128, 256, 512]);
    for m in [ModelConfig::pcn(), ModelConfig::shapenet55(), ModelConfig::desk()] {
        m.validate().unwrap();
        assert_eq!(m.partial_feature_rows(), m.n_in / 4);
    }
}
