use dmt_core::episodes::{
    domain_stats, gen_domain, load_dataset, meta_test, meta_train, save_dataset, FeatureBank, ModelConfig,
    SyntheticDomain, TestConfig, TrainConfig, TrainState, TsfConfig,
};
use dmt_core::features::PyramidSpec;
use dmt_core::Checkpoint;

fn small_model() -> ModelConfig {
    ModelConfig { pyramid: PyramidSpec { channels: vec![8, 8, 8], strides: vec![4, 8, 16] }, ..Default::default() }
}

#[test]
fn saved_artifacts_reproduce_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let source = gen_domain(&SyntheticDomain::source(), 16, 2).unwrap();
    let target = gen_domain(&SyntheticDomain::target_ring(), 12, 2).unwrap();
    save_dataset(&target, dir.path().join("ring")).unwrap();
    let reloaded = load_dataset(dir.path().join("ring")).unwrap();
    assert_eq!(reloaded.len(), target.len());
    for (a, b) in reloaded.samples.iter().zip(&target.samples) {
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.class, b.class);
    }

    let cfg = TrainConfig { episodes: 6, model: small_model(), ..Default::default() };
    let mut state = TrainState::fresh(&cfg).unwrap();
    let bank = FeatureBank::build(&state.model, &source).unwrap();
    meta_train(&cfg, &source, &bank, &mut state, |_| {}).unwrap();
    let stats = domain_stats(&state.model, &source, &bank).unwrap();
    let path = dir.path().join("ckpt.json");
    Checkpoint { state: state.clone(), train: Some(cfg), source_stats: Some(stats.clone()) }.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.source_stats.as_ref(), Some(&stats));

    let test =
        TestConfig { runs: 2, episodes: 3, tsf: TsfConfig { steps: 2, ..Default::default() }, ..Default::default() };
    let eval = |model: &dmt_core::episodes::Model, ds| {
        let bank = FeatureBank::build(model, ds).unwrap();
        meta_test(model, ds, &bank, &test, Some(&stats)).unwrap()
    };
    let original = eval(&state.model, &target);
    let restored = eval(&back.state.model, &reloaded);
    assert_eq!(original.csv(), restored.csv());
    assert_eq!(original.json().unwrap(), restored.json().unwrap());
    let fd = original.summary.feature_distance.unwrap();
    assert!(fd.pre > 0.0 && fd.post > 0.0);
}
