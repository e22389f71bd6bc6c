use linmerge::decompose::{plan_decomposition, Granularity};
use linmerge::features::collect_base_features;
use linmerge::fixture::{build_fixture, FixtureSpec, DEFAULT_INIT_SCALE};
use linmerge::merge::task_vectors;
use linmerge::metrics::non_linearity_score;
use linmerge::model::{bind_weights, eval_cross_entropy, ModelConfig};
use linmerge::Error;

fn spec(seed: u64, tau_scale: f32, trained: bool) -> FixtureSpec {
    FixtureSpec {
        config: ModelConfig::new(16, 4, 2, 32, 24, 16),
        tasks: 2,
        tau_scale,
        dataset_size: 8,
        seq_len: 12,
        seed,
        init_scale: DEFAULT_INIT_SCALE,
        trained,
    }
}

fn model_nls(s: &FixtureSpec) -> f64 {
    let fx = build_fixture(s).unwrap();
    let plan = plan_decomposition(&s.config, Granularity::Model).unwrap();
    let store = collect_base_features(&fx.base, &fx.datasets, &plan, 4, 0).unwrap();
    let tau = &task_vectors(&fx.base, &fx.fine_tuned).unwrap()[0];
    non_linearity_score(&store, &fx.base, tau, plan.group("model").unwrap(), 10)
        .unwrap()
        .mean
}

#[test]
fn small_task_vectors_are_nearly_linear() {
    for seed in 1..=3 {
        let small = model_nls(&spec(seed, 1e-3, false));
        let large = model_nls(&spec(seed, 1.0, false));
        assert!(small < large, "seed {seed}: {small} vs {large}");
    }
}

#[test]
fn fixtures_are_reproducible() {
    let a = build_fixture(&spec(7, 0.1, true)).unwrap();
    let b = build_fixture(&spec(7, 0.1, true)).unwrap();
    assert_eq!(a.base, b.base);
    assert_eq!(a.fine_tuned, b.fine_tuned);
    assert_eq!(a.datasets, b.datasets);
    let c = build_fixture(&spec(8, 0.1, true)).unwrap();
    assert_ne!(a.base, c.base);
}

#[test]
fn trained_fixture_improves_each_task() {
    let s = spec(1, 0.05, true);
    let fx = build_fixture(&s).unwrap();
    let base = bind_weights(&fx.base, &s.config).unwrap();
    for (t, ds) in fx.datasets.iter().enumerate() {
        let ft = bind_weights(&fx.fine_tuned[t], &s.config).unwrap();
        let before = eval_cross_entropy(&base, &ds.sequences).unwrap();
        let after = eval_cross_entropy(&ft, &ds.sequences).unwrap();
        assert!(after < before, "task {t}: {after} vs {before}");
    }
}

#[test]
fn empty_dataset_is_rejected() {
    let s = spec(1, 0.05, false);
    let fx = build_fixture(&s).unwrap();
    let model = bind_weights(&fx.base, &s.config).unwrap();
    assert!(matches!(eval_cross_entropy(&model, &[]), Err(Error::Input(_))));
    assert!(matches!(eval_cross_entropy(&model, &[vec![1]]), Err(Error::Input(_))));
}
