use std::fs;
use std::path::Path;

use vpq_core::checkpoint::{agent_from_checkpoint, Checkpoint};
use vpq_core::config::{EnvKind, RunConfig};
use vpq_core::data::{load_store, read_sessions_csv};
use vpq_core::ensemble::PenaltyMode;
use vpq_core::pipeline::*;
use vpq_core::{Agent64, Error};

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    for kv in [
        "n_items=30",
        "n_sessions=40",
        "test_sessions=15",
        "steps=60",
        "log_every=10",
        "d_embed=8",
        "d_state=8",
        "heads=3",
        "batch_size=8",
        "sync_period=20",
        "eval_episodes=40",
        "eval_k=1,5",
    ] {
        c.apply_override(kv).unwrap();
    }
    c
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_byte_identical_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    let a = cmd_gen_data(&cfg, &tmp.path().join("a")).unwrap();
    let b = cmd_gen_data(&cfg, &tmp.path().join("b")).unwrap();
    assert_eq!(a.outputs, b.outputs);
    for name in [SESSIONS_CSV, TEST_SESSIONS_CSV, TRAIN_STORE, TEST_STORE, CONFIG_RESOLVED] {
        assert_eq!(fs::read(tmp.path().join("a").join(name)).unwrap(), fs::read(tmp.path().join("b").join(name)).unwrap());
    }
    assert!(tmp.path().join("a").join(MANIFEST).exists());
    let sessions = read_sessions_csv(fs::File::open(tmp.path().join("a").join(SESSIONS_CSV)).unwrap()).unwrap();
    let store = load_store(&tmp.path().join("a").join(TRAIN_STORE)).unwrap();
    assert_eq!(store.len(), sessions.len());
    assert_eq!(store.config_hash(), cfg.hash());
    let resolved = fs::read_to_string(tmp.path().join("a").join(CONFIG_RESOLVED)).unwrap();
    assert_eq!(RunConfig::parse(&resolved).unwrap(), cfg);
}

#[test]
fn zero_sessions_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.n_sessions = 0;
    let e = cmd_gen_data(&cfg, tmp.path()).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cmd_gen_data(&cfg, &tmp.path().join("data")).unwrap();
    cfg.steps = 0;
    cmd_train(&cfg, &tmp.path().join("data"), &tmp.path().join("run")).unwrap();
    let ck = Checkpoint::load(&tmp.path().join("run").join(CHECKPOINT)).unwrap();
    let agent: Agent64 = agent_from_checkpoint(&ck).unwrap();
    let init = Agent64::new(agent_dims(&cfg), &mut vpq_core::seed::stream_rng(cfg.seed, vpq_core::seed::INIT)).unwrap();
    assert_eq!(agent, init);
}

#[test]
fn pmul_at_zero_lambda_logs_like_none() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cmd_gen_data(&cfg, &tmp.path().join("data")).unwrap();
    cfg.lambda = 0.0;
    cmd_train(&cfg, &tmp.path().join("data"), &tmp.path().join("pmul")).unwrap();
    cfg.penalty = PenaltyMode::None;
    cmd_train(&cfg, &tmp.path().join("data"), &tmp.path().join("none")).unwrap();
    let a = fs::read(tmp.path().join("pmul").join(TRAIN_LOG)).unwrap();
    let b = fs::read(tmp.path().join("none").join(TRAIN_LOG)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn training_log_reports_weights_in_unit_interval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    cmd_gen_data(&cfg, &tmp.path().join("data")).unwrap();
    cmd_train(&cfg, &tmp.path().join("data"), &tmp.path().join("run")).unwrap();
    let log = fs::read_to_string(tmp.path().join("run").join(TRAIN_LOG)).unwrap();
    let rows: Vec<&str> = log.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for r in rows {
        let w: f64 = r.split(',').nth(4).unwrap().parse().unwrap();
        assert!(w > 0.0 && w <= 1.0, "{r}");
    }
}

#[test]
fn eval_writes_reports_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    cmd_gen_data(&cfg, &tmp.path().join("data")).unwrap();
    cmd_train(&cfg, &tmp.path().join("data"), &tmp.path().join("run")).unwrap();
    let ck = tmp.path().join("run").join(CHECKPOINT);
    let (_, s1) = cmd_eval(&cfg, &ck, &tmp.path().join("data"), &tmp.path().join("e1")).unwrap();
    let (_, s2) = cmd_eval(&cfg, &ck, &tmp.path().join("data"), &tmp.path().join("e2")).unwrap();
    assert_eq!(s1.true_return, s2.true_return);
    assert!(s1.gap.is_none());
    let strip = |v: Vec<(String, Vec<u8>)>| v.into_iter().filter(|(n, _)| n != MANIFEST).collect::<Vec<_>>();
    assert_eq!(strip(read_dir_sorted(&tmp.path().join("e1"))), strip(read_dir_sorted(&tmp.path().join("e2"))));
    let csv = fs::read_to_string(tmp.path().join("e1").join(METRICS_CSV)).unwrap();
    assert!(csv.starts_with("metric,event_type,k,value,count\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
    let first = fs::read_to_string(tmp.path().join("e1").join(RANKED_JSONL)).unwrap();
    let v: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(v["topk"].as_array().unwrap().len(), 5);
    assert_eq!(v["window"].as_array().unwrap().len(), 10);
}

#[test]
fn eval_rejects_a_mismatched_catalog() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    cmd_gen_data(&cfg, &tmp.path().join("data")).unwrap();
    cmd_train(&cfg, &tmp.path().join("data"), &tmp.path().join("run")).unwrap();
    let mut other = cfg.clone();
    other.n_items = 31;
    cmd_gen_data(&other, &tmp.path().join("data2")).unwrap();
    let e = cmd_eval(&other, &tmp.path().join("run").join(CHECKPOINT), &tmp.path().join("data2"), &tmp.path().join("e"));
    assert!(matches!(e, Err(Error::Config(_))));
}

#[test]
fn missing_dataset_is_an_io_error_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let e = cmd_train(&small(), &tmp.path().join("nowhere"), &tmp.path().join("run")).unwrap_err();
    assert!(e.to_string().contains("nowhere"));
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn divergence_aborts_with_a_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cmd_gen_data(&cfg, &tmp.path().join("data")).unwrap();
    cfg.lr = 1e300;
    let e = cmd_train(&cfg, &tmp.path().join("data"), &tmp.path().join("run")).unwrap_err();
    assert!(matches!(e, Error::Divergence(_)), "{e}");
    assert_eq!(e.exit_code(), 4);
    assert!(tmp.path().join("run").join(DIVERGED_CHECKPOINT).exists());
    assert!(!tmp.path().join("run").join(CHECKPOINT).exists());
}

#[test]
fn analyze_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    cmd_analyze(&cfg, tmp.path()).unwrap();
    let absorbed = fs::read_to_string(tmp.path().join(ABSORBED_CSV)).unwrap();
    let val = |w: &str| -> f64 {
        let line = absorbed.lines().find(|l| l.starts_with(&format!("0.99,{w},"))).unwrap();
        line.rsplit(',').next().unwrap().parse().unwrap()
    };
    assert!((val("0.9") - 149.98).abs() < 0.01);
    assert!((val("0.5") - 3.88).abs() < 0.01);

    let text = fs::read_to_string(tmp.path().join(PENALTY_CSV)).unwrap();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut checked = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        let f = |i: usize| rec[i].parse::<f64>().unwrap();
        if f(3) == 0.0 {
            assert_eq!(f(4), f(5));
            assert_eq!(f(4), f(6));
        }
        if f(0) == 1000.0 && f(3) == 20.0 {
            assert!((f(6) - f(9)).abs() < 3.0 * f(10), "p_mul {} vs mc {} se {}", f(6), f(9), f(10));
            checked += 1;
        }
    }
    assert_eq!(checked, 1);
    assert!(fs::read_to_string(tmp.path().join(TOY_CSV)).unwrap().starts_with("index,x,uncertainty,lambda,p_sub,p_mul"));
}

#[test]
fn single_cell_sweep_reduces_to_train_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.apply_override("sweep_lambdas=20").unwrap();
    cfg.apply_override("sweep_seeds=3").unwrap();
    cfg.seed = 3;
    let (_, out) = cmd_sweep(&cfg, &tmp.path().join("sweep")).unwrap();
    cmd_gen_data(&cfg, &tmp.path().join("data")).unwrap();
    cmd_train(&cfg, &tmp.path().join("data"), &tmp.path().join("run")).unwrap();
    let (_, s) = cmd_eval(&cfg, &tmp.path().join("run").join(CHECKPOINT), &tmp.path().join("data"), &tmp.path().join("e")).unwrap();
    assert_eq!(out.rows.len(), 1);
    assert_eq!(out.rows[0].return_mean, Some(s.true_return.mean));
    assert!(out.warnings.is_empty());
}

#[test]
fn sweep_dedups_and_records_failures() {
    let mut cfg = small();
    cfg.env = EnvKind::Micro;
    cfg.steps = 20;
    cfg.apply_override("sweep_lambdas=5,0,5").unwrap();
    cfg.apply_override("sweep_seeds=0,1").unwrap();
    cfg.heads = 1;
    let out = sweep(&cfg).unwrap();
    assert_eq!(out.warnings.len(), 1);
    assert_eq!(out.rows.iter().map(|r| r.lambda).collect::<Vec<_>>(), vec![5.0, 0.0]);
    assert!(out.rows.iter().all(|r| r.n_failed == 2 && r.n_ok == 0 && r.return_mean.is_none()));
    assert!(sweep_cells_csv(&out.cells).contains("failed"));

    cfg.heads = 3;
    let out = sweep(&cfg).unwrap();
    assert!(out.rows.iter().all(|r| r.n_ok == 2 && r.gap_mean.is_some()));
}
