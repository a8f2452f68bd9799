mod common;

use std::fs;

use pnp_active::harness::*;
use pnp_active::Error;

#[test]
fn single_iteration_random_scenes() {
    let pools = common::small_pools(60, 10);
    let cfg = RunConfig {
        method: Method::RandomScenes,
        iterations: 1,
        initial_budget: 0,
        budget: 50,
        ..common::quick_config()
    };
    let st = run_with(&cfg, &pools, None, None).unwrap();
    let max_scene = pools.train.iter().map(|s| s.actors.len()).max().unwrap();
    let n = st.pool.labeled_actor_count();
    assert!(n >= 50 && n < 50 + max_scene, "{n}");
    assert_eq!(st.records.len(), 1);
    assert_eq!(st.records[0].iteration, 1);
    assert_eq!(st.records[0].labeled_actors, n);
}

#[test]
fn overlapping_pools_are_a_config_error() {
    let train = common::gen(5, 0, 1);
    let eval = common::gen(3, 4, 2);
    assert!(matches!(Pools::new(train.clone(), eval, 0.5), Err(Error::Config { .. })));
    assert!(matches!(Pools::new(vec![], common::gen(2, 10, 2), 0.5), Err(Error::Config { .. })));
    let mut dup = train.clone();
    dup.push(train[0].clone());
    assert!(matches!(Pools::new(dup, vec![], 0.5), Err(Error::Config { .. })));
}

#[test]
fn config_validation() {
    let ok = RunConfig::default();
    assert!(ok.validate().is_ok());
    let bad = [
        RunConfig { schema_version: 2, ..ok.clone() },
        RunConfig { iterations: 0, ..ok.clone() },
        RunConfig { budget: 0, ..ok.clone() },
        RunConfig { grid: [0, 3], ..ok.clone() },
        RunConfig { density: 0.0, ..ok.clone() },
        RunConfig {
            method: Method::RandomScenes,
            criterion: Some(pnp_active::scoring::Criterion::PredEntropy),
            ..ok.clone()
        },
    ];
    for b in bad {
        assert!(matches!(b.validate(), Err(Error::Config { .. })), "{b:?}");
    }
    let text = serde_json::to_string(&ok).unwrap();
    let back: RunConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, ok);
    let partial: RunConfig = serde_json::from_str(r#"{"schema_version": 1, "method": "random_regions"}"#).unwrap();
    assert_eq!(partial.method, Method::RandomRegions);
    assert_eq!(partial.budget, ok.budget);
}

fn read(dir: &std::path::Path, f: &str) -> String {
    fs::read_to_string(dir.join(f)).unwrap()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let pools = common::small_pools(60, 10);
    let cfg = RunConfig {
        method: Method::FineGrained,
        iterations: 5,
        budget: 40,
        dump_scores: true,
        ..common::quick_config()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let full = run_with(&cfg, &pools, Some(a.path()), None).unwrap();
    let partial = run_with(&cfg, &pools, Some(b.path()), Some(2)).unwrap();
    assert_eq!(partial.records.len(), 2);
    assert_eq!(latest_checkpoint(b.path()).unwrap(), Some(2));
    let resumed = resume_with(b.path(), &pools, None).unwrap();
    assert_eq!(resumed.records, full.records);
    for f in [METRICS_CSV, STATS_CSV, QUERIES_FILE, METRICS_JSON] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    assert!(a.path().join(SCORES_DIR).read_dir().unwrap().count() >= 5);
    assert_eq!(read_model(&a.path().join(CHECKPOINT_DIR).join("iter_005")).unwrap(), full.params.clone().unwrap());

    // held-out discipline and monotone label growth
    let eval_ids: std::collections::BTreeSet<u64> = pools.eval.iter().map(|s| s.id).collect();
    for p in &full.plans {
        assert!(p.queries.iter().all(|q| !eval_ids.contains(&q.scene_id)));
    }
    assert!(full.records.windows(2).all(|w| w[1].labeled_actors > w[0].labeled_actors));

    // metrics.csv: header plus one line per evaluated iteration
    let csv = read(a.path(), METRICS_CSV);
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().next().unwrap().starts_with("iteration,"));
    let stats = read(a.path(), STATS_CSV);
    assert!(stats.lines().next().unwrap().contains("speed[0,1)"));
}

#[test]
fn method_order_does_not_change_aggregates() {
    let pools = common::small_pools(40, 8);
    let cfg = RunConfig {
        iterations: 2,
        budget: 30,
        initial_budget: 30,
        ..common::quick_config()
    };
    let m = [Method::RandomRegions, Method::RandomScenes];
    let a = compare_methods(&cfg, &m, &[0, 1], &pools).unwrap();
    let b = compare_methods(&cfg, &[m[1], m[0]], &[1, 0], &pools).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(aggregate_csv(&a.rows), aggregate_csv(&b.rows));
    assert_eq!(a.rows.len(), 4);
}

#[test]
fn summaries_report_mean_and_standard_error() {
    let s = summarize(&[Some(1.0), Some(3.0), None]);
    assert_eq!(s.n, 2);
    assert_eq!(s.mean, Some(2.0));
    assert!((s.stderr.unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(summarize(&[None]).mean, None);
}
