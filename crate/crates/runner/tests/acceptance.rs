//! Acceptance suite: runs every criterion at its stated tolerance, prints one PASS/FAIL
//! line each and exits nonzero if any failed.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nas_core::data::generate_splits;
use nas_core::genotype::Genotype;
use nas_core::ops::OpKind;
use nas_runner::commands::*;
use nas_runner::config::RunConfig;
use nas_runner::dispatch::ThreadDispatcher;
use nas_runner::formats::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, detail: String) -> Check {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradients() -> Check {
    use support::grad_cases::*;
    let start = Instant::now();
    let results = run(0..20);
    let elapsed = start.elapsed();
    let (name, worst) = results
        .iter()
        .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))
        .map(|(n, g)| (n.clone(), g.max_rel_err))
        .unwrap_or_default();
    ensure(
        worst < TOL && elapsed < Duration::from_secs(120) && results.len() > 30,
        format!("{} cases x 20 seeds, worst rel err {worst:.2e} ({name}), {:.1}s", results.len(), elapsed.as_secs_f64()),
    )
}

fn relaxation() -> Check {
    use support::relax_cases::*;
    let sum = (0..5).map(eq4_max_err).fold(0.0, f64::max);
    let bitwise = (0..5).all(k1_bitwise);
    let mask = (0..5).map(mask_expectation_err).fold(0.0, f64::max);
    ensure(
        sum < 1e-6 && bitwise && mask < 1e-6,
        format!("weighted-sum err {sum:.1e}, K=1 bitwise {bitwise}, mask expectation err {mask:.1e}"),
    )
}

fn simplex() -> Check {
    use support::gaea_cases::*;
    let (sum_err, least) = random_steps(10_000, 0);
    let hand = hand_example_err();
    let (g, s) = toy_entropies(16, 200, 0.1, 0);
    ensure(
        sum_err < 1e-9 && least >= 0.0 && hand < 1e-12 && g < s,
        format!("sum err {sum_err:.1e}, min entry {least:.1e}, hand err {hand:.1e}, toy entropy {g:.4} vs logit {s:.4}"),
    )
}

fn decoders() -> Check {
    use support::decode_cases::*;
    let (checks, gap) = viterbi_vs_enumeration(50, 0);
    let most = topk_max_inputs(40, 1);
    let hand = hand_selection_ok();
    ensure(
        gap < 1e-12 && checks >= 250 && most <= 2 && hand,
        format!("{checks} viterbi checks, gap {gap:.1e}; max inputs per block {most}; hand selection {hand}"),
    )
}

fn smoke_config(dir: &Path) -> RunConfig {
    let mut c = RunConfig {
        topology: "chain".into(),
        space: "base".into(),
        base_channels: 8,
        epochs_search: 5,
        epochs_retrain: 10,
        batch: 4,
        pc_k: 1,
        alpha_start_epoch: 2,
        select_from_epoch: 3,
        seed: 1,
        output_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    c.data.train = 64;
    c.data.valid = 16;
    c.data.test = 32;
    c.data.height = 32;
    c.data.width = 32;
    c
}

/// Background-everywhere MeanIoU straight from the masks: the background IoU is the
/// background share, the object IoU is 0 (1 if there are no objects at all).
fn trivial_miou(masks: &[u8]) -> f64 {
    let fg = masks.iter().filter(|&&m| m == 1).count();
    let bg = (masks.len() - fg) as f64 / masks.len() as f64;
    (bg + if fg == 0 { 1.0 } else { 0.0 }) / 2.0
}

fn pipeline(cfg: &RunConfig, run: &Path) -> anyhow::Result<(Vec<u8>, Vec<u8>, RetrainSummary)> {
    cmd_search(cfg, Some(run))?;
    cmd_decode(run, None)?;
    let s = cmd_retrain(run, None)?;
    Ok((std::fs::read(run.join("search/arch.json"))?, std::fs::read(run.join("decode/genotype.toml"))?, s))
}

fn smoke(dir: &Path) -> Check {
    let cfg = smoke_config(&dir.join("a"));
    let [_, _, test] = generate_splits(&cfg.data.generator(), cfg.split_sizes(), cfg.seed).map_err(err)?;
    let baseline = trivial_miou(&test.masks());
    let start = Instant::now();
    let (arch_a, g_a, a) = pipeline(&cfg, &dir.join("a")).map_err(err)?;
    let elapsed = start.elapsed();
    let (arch_b, g_b, b) = pipeline(&cfg, &dir.join("b")).map_err(err)?;
    let same = arch_a == arch_b && g_a == g_b && a == b;
    ensure(
        elapsed < Duration::from_secs(600) && same && (a.all_background_miou - baseline).abs() < 1e-12 && a.test_mean_iou >= baseline + 0.05,
        format!(
            "test MeanIoU {:.4} vs all-background {baseline:.4} (margin {:+.4}), {:.0}s, repeat identical {same}",
            a.test_mean_iou,
            a.test_mean_iou - baseline,
            elapsed.as_secs_f64()
        ),
    )
}

fn random_baseline(dir: &Path) -> Check {
    let mut cfg = RunConfig {
        topology: "darts-unet".into(),
        base_channels: 8,
        epochs_search: 4,
        epochs_retrain: 6,
        batch: 4,
        pc_k: 4,
        alpha_start_epoch: 1,
        select_from_epoch: 2,
        seed: 2,
        output_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.data.train = 32;
    cfg.data.valid = 8;
    cfg.data.test = 16;
    cfg.data.height = 32;
    cfg.data.width = 32;
    let (_, _, searched) = pipeline(&cfg, dir).map_err(err)?;
    let r = cmd_random_baseline(dir, 5).map_err(err)?;
    let rows: Vec<RandomSampleRow> = read_csv(&dir.join("random/samples.csv")).map_err(err)?;
    let max = rows.iter().map(|r| r.test_mean_iou).fold(f64::MIN, f64::max);
    let stored: RandomBaselineReport = read_toml(&dir.join("random/report.toml")).map_err(err)?;
    ensure(
        rows.len() == 5 && r.mean_iou_max == max && stored == r && r.searched_mean_iou == Some(searched.test_mean_iou),
        format!(
            "5 random cells: max {:.4}, mean {:.4} +- {:.4}; searched cell {:.4}",
            r.mean_iou_max, r.mean_iou_mean, r.mean_iou_std, searched.test_mean_iou
        ),
    )
}

fn orchestrator() -> Check {
    use support::evo_cases::*;
    let base = nas_core::evo::EvoConfig {
        pop_size: 8,
        generations: 4,
        seed: 11,
        ..Default::default()
    };
    let same = worker_invariance(&base, |w| Box::new(ThreadDispatcher::new(w)), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bad = Vec::new();
    for i in 0..20 {
        let cfg = random_config(&mut rng);
        let out = run(&cfg, &mut ThreadDispatcher::new(cfg.workers));
        if let Err(e) = check_invariants(&cfg, &out) {
            bad.push(format!("config {i}: {e}"));
        }
    }
    ensure(
        same && bad.is_empty(),
        format!("workers 1 vs 4 identical {same}; invariant violations over 20 configs: {}", bad.len()),
    )
    .map_err(|d| format!("{d} {}", bad.join("; ")))
}

fn degenerate(dir: &Path) -> Check {
    let cfg = smoke_config(dir);
    let (run, _) = open_run(Some(&cfg), Some(dir)).map_err(err)?;
    let topo = cfg.topology().map_err(err)?;
    let mut out = Vec::new();
    for op in [OpKind::Skip, OpKind::Zero] {
        let (s, _) = train_genotype(&run, &cfg, &Genotype::uniform(&topo, op)).map_err(err)?;
        if !s.test_mean_iou.is_finite() {
            return Err(format!("all-{} gave MeanIoU {}", op.name(), s.test_mean_iou));
        }
        out.push(format!("all-{} MeanIoU {:.4}", op.name(), s.test_mean_iou));
    }
    Ok(out.join(", "))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let t = tmp.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Check>)> = vec![
        ("gradient suite", Box::new(gradients)),
        ("relaxation equivalences", Box::new(relaxation)),
        ("simplex updates", Box::new(simplex)),
        ("decoder oracles", Box::new(decoders)),
        ("end-to-end smoke", Box::new(move || smoke(&t.join("smoke")))),
        ("random-baseline protocol", Box::new(move || random_baseline(&t.join("random")))),
        ("orchestrator", Box::new(orchestrator)),
        ("degenerate cells", Box::new(move || degenerate(&t.join("degenerate")))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(d) => println!("PASS {} {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {} {name}: {d}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
