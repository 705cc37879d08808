//! End-to-end replays of a small Zipf trace under every policy.

use chunkcache::harness::{gen_synthetic, Config, GenConfig, Policy, Replayer, TraceRecord};
use chunkcache::model::Model;
use chunkcache::store::MetadataStore;

fn setup() -> (Model, Config, Vec<TraceRecord>) {
    let mut config = Config::default();
    config.harness.warmup = 10;
    let trace = gen_synthetic(&GenConfig {
        n_chunks: 60,
        k: 3,
        n_requests: 80,
        ..GenConfig::default()
    })
    .unwrap();
    (Model::new(config.model.clone()).unwrap(), config, trace)
}

#[test]
fn policies_order_cost_and_deviation() {
    // Alpha in the calibrated operating range. Far above it every HIT
    // recomputes in full and the cost ordering against exact_prefix is lost.
    const ALPHA: f64 = 0.44;
    let (model, config, trace) = setup();
    let mut r = Replayer::new(&model, config).unwrap();
    let full = r
        .replay(&trace, Policy::FullRecompute, ALPHA)
        .unwrap()
        .report
        .summary;
    let exact = r
        .replay(&trace, Policy::ExactPrefix, ALPHA)
        .unwrap()
        .report
        .summary;
    let naive = r
        .replay(&trace, Policy::FullCacheNaive, ALPHA)
        .unwrap()
        .report
        .summary;
    let cc = r
        .replay(&trace, Policy::Cachecraft, ALPHA)
        .unwrap()
        .report
        .summary;

    assert_eq!(full.tokens_computed, full.tokens_total);
    assert_eq!(full.mean_deviation, 0.0);
    assert_eq!(exact.mean_deviation, 0.0);
    assert!(exact.tokens_computed <= full.tokens_computed);
    assert!(cc.tokens_computed <= exact.tokens_computed);
    assert!(naive.tokens_computed <= cc.tokens_computed);
    assert!(cc.tokens_computed < full.tokens_computed);
    assert!(cc.mean_deviation < naive.mean_deviation);
    for s in [&full, &exact, &naive, &cc] {
        assert_eq!(s.tokens_total, full.tokens_total);
        assert_eq!(s.tokens_computed + s.tokens_reused, s.tokens_total);
    }
}

#[test]
fn replay_is_deterministic_and_store_survives_snapshot() {
    let (model, config, trace) = setup();
    let mut r = Replayer::new(&model, config).unwrap();
    let a = r.replay(&trace, Policy::Cachecraft, 1.0).unwrap();
    let b = r.replay(&trace, Policy::Cachecraft, 1.0).unwrap();
    assert_eq!(a.report.rows, b.report.rows);

    let store = a.store.unwrap();
    let dir = tempfile::tempdir().unwrap();
    store.save(dir.path()).unwrap();
    let back = MetadataStore::load(dir.path()).unwrap();
    assert_eq!(back.census(), store.census());
    assert_eq!(back.len(), store.len());
    assert!(r
        .replay(&trace, Policy::FullRecompute, 1.0)
        .unwrap()
        .store
        .is_none());
}
