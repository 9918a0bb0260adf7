use std::fs;

use segrl_core::config::RunConfig;
use segrl_core::harness;
use segrl_core::metrics;
use segrl_core::ratios::RatioMode;
use segrl_core::Exec;

fn quick(steps: u64) -> RunConfig {
    let mut c = RunConfig {
        total_steps: steps,
        ..RunConfig::default()
    };
    c.train.record_wall_time = false;
    c.train.eval_k = 2;
    c.train.snapshot_every = 10;
    c.tasks.eval_size = 16;
    c
}

#[test]
fn pois_and_tois_logs_match_with_one_segment() {
    let dir = tempfile::tempdir().unwrap();
    let mut bodies = Vec::new();
    for mode in [RatioMode::Pois, RatioMode::Tois] {
        let mut c = quick(40);
        c.rollout.segment_count = 1;
        c.trainer.ratio_mode = mode;
        let out = dir.path().join(mode.to_string());
        harness::cmd_train(&c, &out).unwrap();
        let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert!(text.starts_with(&format!("# segrl-metrics v1 ratio_mode={mode}")));
        bodies.push(metrics::body_after_header(&text).to_string());
    }
    assert_eq!(bodies[0], bodies[1]);
    assert_eq!(bodies[0].lines().count(), 41);
}

#[test]
fn pois_ratios_are_one_before_every_update() {
    let o = harness::train_loop(&quick(60), 3).unwrap();
    let devs: Vec<f64> = o.diagnostics.iter().filter_map(|d| d.pre_update_max_ratio_dev).collect();
    assert!(devs.len() > 30);
    assert!(devs.iter().all(|&d| d <= 1e-12), "{devs:?}");
}

#[test]
fn retained_groups_are_normalised_and_uniform_groups_dropped() {
    let o = harness::train_loop(&quick(60), 1).unwrap();
    for (row, d) in o.rows.iter().zip(&o.diagnostics) {
        assert_eq!(row.dropped_groups, d.uniform_groups);
        assert_eq!(row.retained_groups, Some(d.advantage_moments.len()));
        for &(m, s) in &d.advantage_moments {
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn parallel_and_sequential_runs_are_identical() {
    let mut c = quick(25);
    let a = harness::train_loop(&c, 5).unwrap();
    c.exec = Exec::Parallel;
    let b = harness::train_loop(&c, 5).unwrap();
    assert_eq!(metrics::write_body(&a.rows).unwrap(), metrics::write_body(&b.rows).unwrap());
    assert_eq!(a.final_params, b.final_params);
}

#[test]
fn same_seed_gives_byte_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let c = quick(20);
    harness::cmd_train(&c, &dir.path().join("a")).unwrap();
    harness::cmd_train(&c, &dir.path().join("b")).unwrap();
    for f in ["metrics.csv", "manifest.json", "params_final.json", "params_step00010.json"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn zero_steps_writes_manifest_and_empty_body() {
    let dir = tempfile::tempdir().unwrap();
    harness::cmd_train(&quick(0), dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let log = metrics::parse_log(&text).unwrap();
    assert!(log.rows.is_empty());
    assert_eq!(metrics::body_after_header(&text).lines().count(), 1);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["checker_id"], "rule-v1");
    assert_eq!(m["ratio_mode"], "POIS");
    assert_eq!(RunConfig::from_toml(m["config"].as_str().unwrap()).unwrap(), quick(0));
}

#[test]
fn snapshots_round_trip_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    harness::cmd_train(&quick(10), dir.path()).unwrap();
    let p = harness::load_params(&dir.path().join("params_final.json")).unwrap();
    // version counts updates; early steps may have no complete group
    assert!((1..=10).contains(&p.version()));
    let mut c = quick(0);
    c.eval.params = Some(dir.path().join("params_final.json"));
    c.eval.k = 3;
    let r = harness::cmd_eval(&c, &dir.path().join("eval")).unwrap();
    assert_eq!(r.questions.len(), 16);
    assert!(r.questions.iter().all(|q| q.k == 3 && q.correct <= 3));
}

#[test]
fn corrupt_snapshot_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("bad.json");
    fs::write(&f, r#"{"vocab_size":3,"context_width":1,"weights":[0.0],"version":0}"#).unwrap();
    let e = harness::load_params(&f).unwrap_err();
    assert_eq!(e.exit_code(), 1, "{e}");
}
