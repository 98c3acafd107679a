use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nas_core::data::SplitRole;
use nas_core::evo::{History, Status};
use nas_core::genotype::Genotype;
use nas_core::metrics::mean_iou;
use nas_core::ops::OpKind;
use nas_runner::commands::{RandomSampleRow, RetrainSummary};
use nas_runner::config::RunConfig;
use nas_runner::formats::*;

fn tiny(topology: &str) -> RunConfig {
    let mut c = RunConfig {
        topology: topology.into(),
        depth: Some(2),
        base_channels: 4,
        epochs_search: 2,
        epochs_retrain: 2,
        batch: 2,
        pc_k: 2,
        alpha_start_epoch: 1,
        select_from_epoch: 0,
        seed: 3,
        ..RunConfig::default()
    };
    c.data.train = 6;
    c.data.valid = 4;
    c.data.test = 4;
    c.data.height = 16;
    c.data.width = 16;
    c.evolve.pop_size = 4;
    c.evolve.generations = 2;
    c.evolve.budget_epochs = 1;
    c
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("config.in.toml");
    std::fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}

fn nas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nas")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = nas(args);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "nas {args:?} failed: {err}");
    serde_json::from_str(err.lines().last().unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn searched(dir: &Path, cfg: &RunConfig, name: &str) -> PathBuf {
    let run = dir.join(name);
    let config = write_config(dir, cfg);
    ok(&["search", "--config", s(&config), "--run", s(&run)]);
    run
}

#[test]
fn search_is_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("chain");
    let a = searched(dir.path(), &cfg, "a");
    let b = searched(dir.path(), &cfg, "b");
    for f in ["search/arch.json", "search/entropy.csv", "search/log.csv", "search/supernet.weights"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(x == y, "{f} differs between identical runs");
    }
    let m = RunManifest::load(&a).unwrap();
    assert_eq!(m.stages["search"].status, StageStatus::Done);
    let rows: Vec<EntropyCsvRow> = read_csv(&a.join("search/entropy.csv")).unwrap();
    assert_eq!(rows.len(), cfg.epochs_search);
    let w: Vec<(String, nas_core::tensor::Tensor<f32>)> = read_weights(&a.join("search/supernet.weights")).unwrap();
    assert!(!w.is_empty());
}

#[test]
fn uniform_checkpoint_decodes_to_first_op_and_dot_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny("darts-unet");
    // architecture updates never start, so the checkpoint stays uniform
    cfg.alpha_start_epoch = 10;
    cfg.epochs_search = 1;
    let run = searched(dir.path(), &cfg, "run");
    ok(&["decode", "--run", s(&run)]);
    let g = read_genotype(&run.join("decode/genotype.toml")).unwrap();
    let first = cfg.topology().unwrap().space.ops[0];
    assert!(g.normal.edges.iter().all(|e| e.op == first));
    // ties keep the lower edges, two per block
    assert_eq!(g.normal.edges.len(), 2 * cfg.topology().unwrap().cell.num_blocks);
    for kind in g.kinds() {
        let text = std::fs::read_to_string(run.join(format!("decode/cell_{}.dot", kind.name()))).unwrap();
        let mut edges = parse_dot_edges(&text).unwrap();
        edges.sort();
        let mut want: Vec<_> = g.cell(kind).edges.iter().map(|e| (e.from, e.to, e.op.name())).collect();
        want.sort();
        assert_eq!(edges, want);
    }
    // decoder flags override the config
    ok(&["decode", "--run", s(&run), "--cell", "argmax", "--paths", "viterbi"]);
    let g2 = read_genotype(&run.join("decode/genotype.toml")).unwrap();
    assert_eq!(g2.normal.edges.len(), cfg.topology().unwrap().cell.edges.len());
}

#[test]
fn degenerate_genotype_retrains_and_scores_match_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("chain");
    let config = write_config(dir.path(), &cfg);
    let run = dir.path().join("run");
    // a run with data but no search: the genotype is given directly
    ok(&["random-baseline", "--config", s(&config), "--run", s(&run), "--n", "1"]);
    let topo = cfg.topology().unwrap();
    for op in [OpKind::Skip, OpKind::Zero] {
        let gpath = dir.path().join(format!("{}.toml", op.name()));
        write_genotype(&gpath, &Genotype::uniform(&topo, op)).unwrap();
        ok(&["retrain", "--run", s(&run), "--genotype", s(&gpath)]);
        let summary: RetrainSummary = read_toml(&run.join("retrain/summary.toml")).unwrap();
        let pred = std::fs::read(run.join("retrain/predictions.u8")).unwrap();
        let test = read_tiles(&run.join("data/test.tiles"), SplitRole::Test, SplitRole::Test.derive_seed(cfg.seed)).unwrap();
        assert_eq!(pred.len(), summary.predictions_shape.iter().product::<usize>());
        let miou = mean_iou(&pred, &test.masks());
        assert!((miou - summary.test_mean_iou).abs() < 1e-12);
        assert!(summary.test_mean_iou.is_finite());
    }
}

#[test]
fn random_baseline_report_matches_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("chain");
    let config = write_config(dir.path(), &cfg);
    let run = dir.path().join("run");
    let v = ok(&["random-baseline", "--config", s(&config), "--run", s(&run), "--n", "2"]);
    let rows: Vec<RandomSampleRow> = read_csv(&run.join("random/samples.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    let mean = rows.iter().map(|r| r.test_mean_iou).sum::<f64>() / 2.0;
    let reported = v["report"]["mean_iou_mean"].as_f64().unwrap();
    assert!((mean - reported).abs() < 1e-12);
    let max = rows.iter().map(|r| r.test_mean_iou).fold(f64::MIN, f64::max);
    assert_eq!(v["report"]["mean_iou_max"].as_f64().unwrap(), max);
    for i in 0..2 {
        read_genotype(&run.join(format!("random/sample{i}.toml"))).unwrap().validate(&cfg.topology().unwrap()).unwrap();
    }
}

fn history(run: &Path) -> History {
    History {
        records: read_history(&run.join("evolve/history.jsonl")).unwrap(),
    }
}

#[test]
fn evolve_records_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("chain");
    let config = write_config(dir.path(), &cfg);
    let full = dir.path().join("full");
    let v = ok(&["evolve", "--config", s(&config), "--run", s(&full)]);
    assert_eq!(v["completed"], true);
    let h = history(&full);
    assert!(h.len() >= 8);
    let trace: nas_core::evo::MessageTrace = read_json(&full.join("evolve/trace.json")).unwrap();
    trace.audit().unwrap();
    read_genotype(&full.join("evolve/best.toml")).unwrap();

    let cut = dir.path().join("cut");
    let v = ok(&["evolve", "--config", s(&config), "--run", s(&cut), "--stop-after", "0"]);
    assert_eq!(v["completed"], false);
    assert_eq!(RunManifest::load(&cut).unwrap().stages["evolve"].status, StageStatus::Interrupted);
    assert_eq!(history(&cut).len(), cfg.evolve.pop_size);
    ok(&["evolve", "--run", s(&cut), "--resume"]);
    assert_eq!(history(&cut).normalized(), h.normalized());
}

#[test]
fn memory_budget_rejects_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny("chain");
    cfg.evolve.memory_budget_mb = Some(1e-6);
    let config = write_config(dir.path(), &cfg);
    let run = dir.path().join("run");
    ok(&["evolve", "--config", s(&config), "--run", s(&run)]);
    let h = history(&run);
    assert_eq!(h.len(), 8);
    assert!(h.records.iter().all(|r| r.status == Status::RejectedMemory));
    let text = std::fs::read_to_string(run.join("evolve/history.jsonl")).unwrap();
    assert!(text.contains("\"rejected-memory\""));
}

fn expect_error(args: &[&str]) -> String {
    let out = nas(args);
    assert!(!out.status.success(), "nas {args:?} should fail");
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    let v: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(v["ok"], false);
    v["error"].as_str().unwrap().to_string()
}

#[test]
fn errors_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("chain");
    let config = write_config(dir.path(), &cfg);
    let run = dir.path().join("run");
    ok(&["random-baseline", "--config", s(&config), "--run", s(&run), "--n", "1"]);
    let e = expect_error(&["decode", "--run", s(&run)]);
    assert!(e.contains("search"), "{e}");
    expect_error(&["retrain", "--run", s(&dir.path().join("missing"))]);

    let mut bad = tiny("no-such-topology");
    bad.depth = None;
    let p = write_config(dir.path(), &bad);
    expect_error(&["search", "--config", s(&p)]);
    let mut bad = tiny("resnext-unet");
    bad.edge_norm = false;
    let p = write_config(dir.path(), &bad);
    let e = expect_error(&["search", "--config", s(&p), "--run", s(&dir.path().join("r"))]);
    assert!(e.contains("large"), "{e}");
    assert!(!dir.path().join("r").exists());

    std::fs::write(&p, "schema_version = 1\nbogus = 3\n").unwrap();
    expect_error(&["search", "--config", s(&p)]);
    std::fs::write(&p, "schema_version = 7\n").unwrap();
    expect_error(&["search", "--config", s(&p)]);
}

#[test]
fn default_config_and_report() {
    let out = nas(&["default-config"]);
    assert!(out.status.success());
    let cfg = RunConfig::parse(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default());

    let dir = tempfile::tempdir().unwrap();
    let run = searched(dir.path(), &tiny("chain"), "run");
    let out = nas(&["report", "--run", s(&run)]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("| search |"));
    assert_eq!(std::fs::read_to_string(run.join("report.md")).unwrap(), text);
}
