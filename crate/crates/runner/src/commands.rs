//! The pipeline stages behind each subcommand. Every stage reads its inputs from the run
//! directory, writes its artifacts, then records itself in the manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use nas_core::data::{generate_splits, DatasetSplit};
use nas_core::decode::{decode_genotype, DecodeOptions};
use nas_core::evo::{run_evolution, GenerationSummary, HistoryRecord, MemoryGuard, TrainingEvaluator};
use nas_core::genotype::Genotype;
use nas_core::memory::parameter_count;
use nas_core::space::Topology;
use nas_core::supernet::{ArchParams, Network};
use nas_core::tensor::Real;
use nas_core::train::{all_background_miou, retrain, search};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Precision, RunConfig};
use crate::dispatch::ThreadDispatcher;
use crate::formats::*;

const RETRAIN_INIT_TAG: u64 = 0x5245_5452_4149_4e00;
const RANDOM_TAG: u64 = 0x5241_4e44_4f4d_0000;

fn stage(artifacts: &[(&str, &str)], summary: &[(&str, f64)], status: StageStatus) -> StageRecord {
    StageRecord {
        status,
        artifacts: artifacts.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        summary: summary.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

/// Opens an existing run, or starts one from `config` (in `run` or the configured output dir).
pub fn open_run(config: Option<&RunConfig>, run: Option<&Path>) -> Result<(PathBuf, RunManifest)> {
    match (config, run) {
        (Some(cfg), run) => {
            cfg.validate()?;
            let dir = run.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
            let mut m = match RunManifest::load(&dir) {
                Ok(m) if &m.config == cfg => m,
                _ => RunManifest::new(cfg.clone()),
            };
            m.config = cfg.clone();
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            atomic_write(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
            write_toml(&dir.join("topology.toml"), &cfg.topology()?)?;
            m.save(&dir)?;
            Ok((dir, m))
        }
        (None, Some(run)) => Ok((run.to_path_buf(), RunManifest::load(run)?)),
        (None, None) => bail!("give a config file or a run directory"),
    }
}

/// The run's template file, which must agree with the configuration.
pub fn run_topology(run: &Path, cfg: &RunConfig) -> Result<Topology> {
    let want = cfg.topology()?;
    let path = run.join("topology.toml");
    if path.exists() {
        let t: Topology = read_toml(&path)?;
        ensure!(t == want, "{} does not match the configured topology", path.display());
    }
    Ok(want)
}

/// Train/valid/test splits, read from the run's tile cache when it matches the config.
pub fn load_data(run: &Path, cfg: &RunConfig) -> Result<[DatasetSplit; 3]> {
    let dir = run.join("data");
    let index_path = dir.join("index.toml");
    if let Ok(index) = read_toml::<TileIndex>(&index_path) {
        if index.schema_version == crate::config::SCHEMA_VERSION && index.data == cfg.data && index.run_seed == cfg.seed {
            let mut out = Vec::new();
            for e in &index.splits {
                let s = read_tiles(&dir.join(&e.file), e.role, e.role.derive_seed(cfg.seed))?;
                ensure!(s.len() == e.count, "tile file {} holds {} patches, index says {}", e.file, s.len(), e.count);
                out.push(s);
            }
            if let Ok(arr) = <[DatasetSplit; 3]>::try_from(out) {
                return Ok(arr);
            }
        }
    }
    let splits = generate_splits(&cfg.data.generator(), cfg.split_sizes(), cfg.seed)?;
    let mut entries = Vec::new();
    for s in &splits {
        let file = format!("{}.tiles", s.role.name());
        write_tiles(&dir.join(&file), s)?;
        entries.push(TileIndexEntry {
            role: s.role,
            file,
            count: s.len(),
        });
    }
    write_toml(
        &index_path,
        &TileIndex {
            schema_version: crate::config::SCHEMA_VERSION,
            run_seed: cfg.seed,
            data: cfg.data.clone(),
            splits: entries,
        },
    )?;
    Ok(splits)
}

// ---------------------------------------------------------------------------------------
// search

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub epochs: usize,
    pub final_valid_miou: f64,
    pub final_mean_entropy: f64,
}

pub fn cmd_search(cfg: &RunConfig, run: Option<&Path>) -> Result<(PathBuf, SearchSummary)> {
    // every config check (topology/space pairing included) happens before any compute
    cfg.validate()?;
    let (run, mut m) = open_run(Some(cfg), run)?;
    let s = match cfg.precision {
        Precision::F32 => search_stage::<f32>(&run, cfg)?,
        Precision::F64 => search_stage::<f64>(&run, cfg)?,
    };
    m.set_stage(
        "search",
        stage(
            &[
                ("arch", "search/arch.json"),
                ("weights", "search/supernet.weights"),
                ("entropy", "search/entropy.csv"),
                ("log", "search/log.csv"),
            ],
            &[
                ("final_valid_miou", s.final_valid_miou),
                ("final_mean_entropy", s.final_mean_entropy),
            ],
            StageStatus::Done,
        ),
    );
    m.save(&run)?;
    Ok((run, s))
}

fn search_stage<T: Real>(run: &Path, cfg: &RunConfig) -> Result<SearchSummary> {
    let topo = run_topology(run, cfg)?;
    let [train, valid, _] = load_data(run, cfg)?;
    let mut net = Network::<T>::supernet(topo, cfg.net_config(), cfg.seed)?;
    let out = search(&mut net, &train, &valid, &cfg.search_train_config())?;
    let dir = run.join("search");
    write_json(&dir.join("arch.json"), &out.arch)?;
    write_weights(&dir.join("supernet.weights"), &net.params().snapshot())?;
    write_entropy_csv(&dir.join("entropy.csv"), &out.trace)?;
    write_epoch_csv(&dir.join("log.csv"), &out.logs)?;
    let last = out.logs.last().context("search ran no epochs")?;
    Ok(SearchSummary {
        epochs: out.logs.len(),
        final_valid_miou: last.valid_miou,
        final_mean_entropy: last.mean_entropy.unwrap_or(f64::NAN),
    })
}

// ---------------------------------------------------------------------------------------
// decode

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathCsvRow {
    pub path: String,
    pub log_prob: f64,
    pub kept: bool,
}

pub fn cmd_decode(run: &Path, opts: Option<DecodeOptions>) -> Result<Genotype> {
    let mut m = RunManifest::load(run)?;
    let cfg = m.config.clone();
    let opts = opts.unwrap_or_else(|| cfg.decode.options());
    let arch_path = m
        .artifact(run, "search", "arch")
        .filter(|p| p.exists())
        .with_context(|| format!("no architecture checkpoint in {}; run `search` first", run.display()))?;
    let arch: ArchParams = read_json(&arch_path)?;
    let topo = run_topology(run, &cfg)?;
    let decoded = decode_genotype(&topo, &arch, &opts)?;
    let g = decoded.genotype;
    let dir = run.join("decode");
    write_genotype(&dir.join("genotype.toml"), &g)?;
    let mut artifacts = vec![("genotype", "decode/genotype.toml"), ("network_dot", "decode/network.dot")];
    for kind in g.kinds() {
        let file = format!("cell_{}.dot", kind.name());
        atomic_write(&dir.join(&file), cell_dot(&topo, kind, g.cell(kind)).as_bytes())?;
    }
    artifacts.push(("cell_normal_dot", "decode/cell_normal.dot"));
    if g.reduce.is_some() {
        artifacts.push(("cell_reduce_dot", "decode/cell_reduce.dot"));
    }
    atomic_write(&dir.join("network.dot"), network_dot(&topo, &g).as_bytes())?;
    let fmt_path = |p: &[usize]| p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("-");
    let mut rows = Vec::new();
    if let Some(mp) = &decoded.multipath {
        for (i, s) in mp.scores.iter().enumerate() {
            rows.push(PathCsvRow {
                path: fmt_path(&s.path),
                log_prob: s.score,
                kept: mp.kept.contains(&i),
            });
        }
    }
    if let Some(v) = &decoded.viterbi {
        rows.push(PathCsvRow {
            path: fmt_path(&v.path),
            log_prob: v.score,
            kept: true,
        });
    }
    write_rows(&dir.join("paths.csv"), &rows)?;
    artifacts.push(("paths", "decode/paths.csv"));
    let params = parameter_count(&topo, &g, 1, 2)? as f64;
    m.set_stage("decode", stage(&artifacts, &[("parameters", params)], StageStatus::Done));
    m.save(run)?;
    Ok(g)
}

// ---------------------------------------------------------------------------------------
// retrain

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainSummary {
    pub test_mean_iou: f64,
    pub best_epoch: usize,
    pub best_valid_miou: f64,
    pub all_background_miou: f64,
    pub parameters: usize,
    pub predictions_shape: [usize; 3],
}

/// Retrains `genotype` from fresh weights and evaluates it on the test split.
pub fn train_genotype(run: &Path, cfg: &RunConfig, g: &Genotype) -> Result<(RetrainSummary, RetrainArtifacts)> {
    match cfg.precision {
        Precision::F32 => train_genotype_t::<f32>(run, cfg, g),
        Precision::F64 => train_genotype_t::<f64>(run, cfg, g),
    }
}

pub struct RetrainArtifacts {
    pub logs: Vec<nas_core::train::EpochLog>,
    pub report: nas_core::metrics::EvalReport,
    pub predictions: Vec<u8>,
    pub weights: Box<dyn FnOnce(&Path) -> Result<()>>,
}

fn train_genotype_t<T: Real>(run: &Path, cfg: &RunConfig, g: &Genotype) -> Result<(RetrainSummary, RetrainArtifacts)> {
    let topo = run_topology(run, cfg)?;
    g.validate(&topo)?;
    let [train, valid, test] = load_data(run, cfg)?;
    let mut net = Network::<T>::discrete(topo.clone(), g, cfg.discrete_net_config(), cfg.seed ^ RETRAIN_INIT_TAG)?;
    let out = retrain(&mut net, &train, &valid, &test, &cfg.retrain_config())?;
    let summary = RetrainSummary {
        test_mean_iou: out.test.mean_iou,
        best_epoch: out.best_epoch,
        best_valid_miou: out.best_valid_miou,
        all_background_miou: all_background_miou(&test),
        parameters: net.params().numel(),
        predictions_shape: [test.len(), test.height, test.width],
    };
    let weights = out.best_weights;
    Ok((
        summary,
        RetrainArtifacts {
            logs: out.logs,
            report: out.test,
            predictions: out.test_predictions,
            weights: Box::new(move |p: &Path| write_weights(p, &weights)),
        },
    ))
}

pub fn cmd_retrain(run: &Path, genotype: Option<&Path>) -> Result<RetrainSummary> {
    let mut m = RunManifest::load(run)?;
    let cfg = m.config.clone();
    let g_path = match genotype {
        Some(p) => p.to_path_buf(),
        None => m
            .artifact(run, "decode", "genotype")
            .with_context(|| format!("no genotype in {}; run `decode` first or pass one", run.display()))?,
    };
    let g = read_genotype(&g_path)?;
    let (summary, art) = train_genotype(run, &cfg, &g)?;
    let dir = run.join("retrain");
    if genotype.is_some() {
        write_genotype(&dir.join("genotype.toml"), &g)?;
    }
    (art.weights)(&dir.join("best.weights"))?;
    write_epoch_csv(&dir.join("log.csv"), &art.logs)?;
    write_metrics_csv(&dir.join("metrics.csv"), &art.report)?;
    atomic_write(&dir.join("predictions.u8"), &art.predictions)?;
    write_toml(&dir.join("summary.toml"), &summary)?;
    let mut artifacts = vec![
        ("weights", "retrain/best.weights"),
        ("log", "retrain/log.csv"),
        ("metrics", "retrain/metrics.csv"),
        ("predictions", "retrain/predictions.u8"),
        ("summary", "retrain/summary.toml"),
    ];
    if genotype.is_some() {
        artifacts.push(("genotype", "retrain/genotype.toml"));
    }
    m.set_stage(
        "retrain",
        stage(
            &artifacts,
            &[
                ("test_mean_iou", summary.test_mean_iou),
                ("best_epoch", summary.best_epoch as f64),
                ("all_background_miou", summary.all_background_miou),
            ],
            StageStatus::Done,
        ),
    );
    m.save(run)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------------------
// random baseline

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomSampleRow {
    pub sample: usize,
    pub test_mean_iou: f64,
    pub best_valid_miou: f64,
    pub best_epoch: usize,
    pub parameters: usize,
    pub parameter_free: bool,
    /// Normal-cell edges as `from>to:op`, space separated.
    pub normal_cell: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomBaselineReport {
    pub samples: usize,
    pub mean_iou_mean: f64,
    pub mean_iou_std: f64,
    pub mean_iou_min: f64,
    pub mean_iou_max: f64,
    /// Test MeanIoU of the retrained searched cell, when the run has one.
    pub searched_mean_iou: Option<f64>,
}

pub fn cmd_random_baseline(run: &Path, n: usize) -> Result<RandomBaselineReport> {
    ensure!(n >= 1, "need at least one sample");
    let mut m = RunManifest::load(run)?;
    let cfg = m.config.clone();
    let topo = run_topology(run, &cfg)?;
    let searched = m.stages.get("retrain").and_then(|s| s.summary.get("test_mean_iou").copied());
    // the searched run's network part, so only cells differ
    let network = match m.artifact(run, "decode", "genotype") {
        Some(p) => Some(read_genotype(&p)?.network),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ RANDOM_TAG);
    let mut rows = Vec::new();
    let dir = run.join("random");
    for i in 0..n {
        let mut g = nas_core::evo::sample_random_genotype(&topo, Some(cfg.decode.k), &mut rng);
        if let Some(net) = &network {
            g.network = net.clone();
        }
        write_genotype(&dir.join(format!("sample{i}.toml")), &g)?;
        let (s, _) = train_genotype(run, &cfg, &g)?;
        rows.push(RandomSampleRow {
            sample: i,
            test_mean_iou: s.test_mean_iou,
            best_valid_miou: s.best_valid_miou,
            best_epoch: s.best_epoch,
            parameters: s.parameters,
            parameter_free: g.is_parameter_free(),
            normal_cell: g
                .normal
                .edges
                .iter()
                .map(|e| format!("{}>{}:{}", e.from, e.to, e.op))
                .collect::<Vec<_>>()
                .join(" "),
        });
    }
    write_rows(&dir.join("samples.csv"), &rows)?;
    let ious: Vec<f64> = rows.iter().map(|r| r.test_mean_iou).collect();
    let mean = ious.iter().sum::<f64>() / n as f64;
    let var = ious.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let report = RandomBaselineReport {
        samples: n,
        mean_iou_mean: mean,
        mean_iou_std: var.sqrt(),
        mean_iou_min: ious.iter().copied().fold(f64::INFINITY, f64::min),
        mean_iou_max: ious.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        searched_mean_iou: searched,
    };
    write_toml(&dir.join("report.toml"), &report)?;
    let mut summary = vec![("max_mean_iou", report.mean_iou_max), ("mean_mean_iou", mean)];
    if let Some(s) = searched {
        summary.push(("searched_mean_iou", s));
    }
    m.set_stage(
        "random-baseline",
        stage(&[("samples", "random/samples.csv"), ("report", "random/report.toml")], &summary, StageStatus::Done),
    );
    m.save(run)?;
    Ok(report)
}

// ---------------------------------------------------------------------------------------
// evolve

#[derive(Clone, Debug, PartialEq)]
pub struct EvolveSummary {
    pub records: usize,
    pub best_fitness: Option<f64>,
    pub completed: bool,
}

/// `stop_after` ends the run once that generation is written, as an interruption would.
pub fn cmd_evolve(run: &Path, resume: bool, stop_after: Option<usize>) -> Result<EvolveSummary> {
    let mut m = RunManifest::load(run)?;
    let cfg = m.config.clone();
    let topo = run_topology(run, &cfg)?;
    let evo = cfg.evo_config()?;
    let [train, valid, _] = load_data(run, &cfg)?;
    let dir = run.join("evolve");
    fs::create_dir_all(&dir)?;
    let history_path = dir.join("history.jsonl");
    let gens_path = dir.join("generations.jsonl");
    let cached = if resume && history_path.exists() { read_history(&history_path)? } else { Vec::new() };
    // replayed generations are written back as they are reached
    atomic_write(&history_path, b"")?;
    atomic_write(&gens_path, b"")?;
    let guard = cfg.evolve.memory_budget_mb.map(|mb| MemoryGuard {
        budget: (mb * 1e6) as usize,
        input_shape: [1, cfg.data.height, cfg.data.width],
        batch: cfg.batch,
        num_classes: 2,
        bytes: 4,
    });
    let evaluator = TrainingEvaluator {
        topology: &topo,
        net: cfg.discrete_net_config(),
        train: &train,
        valid: &valid,
        train_cfg: cfg.retrain_config(),
    };
    let mut dispatcher = ThreadDispatcher::new(evo.workers);
    let mut io_err = None;
    let mut on_gen = |s: &GenerationSummary, recs: &[HistoryRecord]| {
        let res = append_jsonl(&history_path, recs).and_then(|_| append_jsonl(&gens_path, std::slice::from_ref(s)));
        if let Err(e) = res {
            io_err = Some(e);
            return ControlFlow::Break(());
        }
        match stop_after {
            Some(g) if s.generation >= g => ControlFlow::Break(()),
            _ => ControlFlow::Continue(()),
        }
    };
    let out = run_evolution(&evo, &topo, guard.as_ref(), &mut dispatcher, &evaluator, &cached, &mut on_gen)?;
    if let Some(e) = io_err {
        return Err(e);
    }
    out.trace.audit()?;
    write_json(&dir.join("trace.json"), &out.trace)?;
    let best = out.history.best().cloned();
    if let Some(b) = &best {
        write_genotype(&dir.join("best.toml"), &b.genotype)?;
    }
    let mut summary = vec![("records", out.history.len() as f64)];
    if let Some(b) = best.as_ref().and_then(|b| b.fitness) {
        summary.push(("best_fitness", b));
    }
    let status = if out.completed { StageStatus::Done } else { StageStatus::Interrupted };
    let mut artifacts = vec![
        ("history", "evolve/history.jsonl"),
        ("generations", "evolve/generations.jsonl"),
        ("trace", "evolve/trace.json"),
    ];
    if best.is_some() {
        artifacts.push(("best", "evolve/best.toml"));
    }
    m.set_stage("evolve", stage(&artifacts, &summary, status));
    m.save(run)?;
    Ok(EvolveSummary {
        records: out.history.len(),
        best_fitness: best.and_then(|b| b.fitness),
        completed: out.completed,
    })
}

// ---------------------------------------------------------------------------------------
// report

/// Markdown summary of every finished stage; also written to `report.md`.
pub fn cmd_report(run: &Path) -> Result<String> {
    let m = RunManifest::load(run)?;
    let cfg = &m.config;
    let mut s = String::new();
    writeln!(s, "# Run report\n")?;
    writeln!(
        s,
        "topology `{}`, space `{}`, {} base channels, seed {}, {}x{} patches ({}/{}/{})\n",
        cfg.topology, cfg.space, cfg.base_channels, cfg.seed, cfg.data.height, cfg.data.width, cfg.data.train, cfg.data.valid, cfg.data.test
    )?;
    writeln!(s, "| stage | status | summary |\n|---|---|---|")?;
    for (name, st) in &m.stages {
        let summ: Vec<String> = st.summary.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        writeln!(s, "| {name} | {:?} | {} |", st.status, summ.join(", "))?;
    }
    if let Some(p) = m.artifact(run, "search", "entropy") {
        let rows: Vec<EntropyCsvRow> = read_csv(&p)?;
        if let (Some(a), Some(b)) = (rows.first(), rows.last()) {
            writeln!(s, "\n## Search\n\nmean edge entropy {:.4} (epoch {}) -> {:.4} (epoch {})", a.mean_entropy, a.epoch, b.mean_entropy, b.epoch)?;
        }
    }
    if let Some(p) = m.artifact(run, "decode", "genotype") {
        let g = read_genotype(&p)?;
        writeln!(s, "\n## Genotype\n")?;
        for kind in g.kinds() {
            let edges: Vec<String> = g.cell(kind).edges.iter().map(|e| format!("{}->{} {}", e.from, e.to, e.op)).collect();
            writeln!(s, "- {} cell: {}", kind.name(), edges.join(", "))?;
        }
        writeln!(s, "- network: {} nodes, {} edges, {} paths", g.network.nodes.len(), g.network.edges.len(), g.network.paths.len())?;
        if g.is_parameter_free() {
            writeln!(s, "- every kept op is parameter-free (degenerate cell)")?;
        }
    }
    if let Some(p) = m.artifact(run, "retrain", "metrics") {
        let rows: Vec<PrCsvRow> = read_csv(&p)?;
        let summary: RetrainSummary = read_toml(&m.artifact(run, "retrain", "summary").context("retrain summary missing")?)?;
        writeln!(
            s,
            "\n## Retrain\n\ntest MeanIoU {:.4} (all-background {:.4}), best epoch {}\n\n| IoU threshold | precision | recall |\n|---|---|---|",
            summary.test_mean_iou, summary.all_background_miou, summary.best_epoch
        )?;
        for r in rows {
            writeln!(s, "| {:.1} | {:.4} | {:.4} |", r.threshold, r.precision, r.recall)?;
        }
    }
    if let Some(p) = m.artifact(run, "random-baseline", "samples") {
        let rows: Vec<RandomSampleRow> = read_csv(&p)?;
        let rep: RandomBaselineReport = read_toml(&m.artifact(run, "random-baseline", "report").context("random report missing")?)?;
        writeln!(s, "\n## Random cells vs searched cell\n\n| cell | test MeanIoU |\n|---|---|")?;
        for r in &rows {
            writeln!(s, "| random {} | {:.4} |", r.sample, r.test_mean_iou)?;
        }
        match rep.searched_mean_iou {
            Some(x) => writeln!(s, "| searched | {x:.4} |")?,
            None => writeln!(s, "| searched | not retrained |")?,
        }
        writeln!(s, "\nmax over random cells {:.4}, mean {:.4} +- {:.4}", rep.mean_iou_max, rep.mean_iou_mean, rep.mean_iou_std)?;
    }
    if let Some(p) = m.stages.get("evolve").and_then(|st| st.artifacts.get("history")).map(|p| run.join(p)) {
        if p.exists() {
            let h = read_history(&p)?;
            let mut by_status: BTreeMap<String, usize> = BTreeMap::new();
            for r in &h {
                *by_status.entry(format!("{:?}", r.status)).or_default() += 1;
            }
            let best = h.iter().filter_map(|r| r.fitness).fold(f64::NEG_INFINITY, f64::max);
            writeln!(s, "\n## Evolution\n\n{} records, best fitness {best:.4}, by status {by_status:?}", h.len())?;
        }
    }
    atomic_write(&run.join("report.md"), s.as_bytes())?;
    Ok(s)
}
