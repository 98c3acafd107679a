//! On-disk formats of a run directory.
//!
//! | file | format |
//! |---|---|
//! | `manifest.toml` | [`RunManifest`], rewritten atomically after every stage |
//! | `topology.toml` | the resolved [`Topology`] (cell, network, op space) |
//! | `*.weights` | binary weights, see [`write_weights`] |
//! | `search/arch.json` | architecture parameters as JSON (64-bit, round-trip exact) |
//! | `decode/genotype.toml` | [`GenotypeFile`] |
//! | `*.dot` | Graphviz graphs; cell edges are labelled with their op name |
//! | `*.csv` | entropy trace, epoch logs, PR curves, random-baseline samples |
//! | `evolve/history.jsonl` | one [`HistoryRecord`] per line |
//! | `data/index.toml`, `data/*.tiles` | dataset cache, see [`write_tiles`] |

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use nas_core::arch_optim::EntropyTrace;
use nas_core::data::{DatasetSplit, Patch, SplitRole};
use nas_core::evo::HistoryRecord;
use nas_core::genotype::{CellGenotype, Genotype};
use nas_core::metrics::EvalReport;
use nas_core::space::{CellKind, Topology};
use nas_core::tensor::{Real, Tensor};
use nas_core::train::EpochLog;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Writes through a temporary sibling and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_toml<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    atomic_write(path, toml::to_string_pretty(value)?.as_bytes())
}

pub fn read_toml<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    atomic_write(path, serde_json::to_string_pretty(value)?.as_bytes())
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

// ---------------------------------------------------------------------------------------
// manifest

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Running,
    Done,
    Interrupted,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    /// Artifact name to path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default)]
    pub summary: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config: RunConfig,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.toml";

    pub fn new(config: RunConfig) -> Self {
        Self {
            schema_version: crate::config::SCHEMA_VERSION,
            config,
            stages: BTreeMap::new(),
        }
    }

    pub fn load(run: &Path) -> Result<Self> {
        let m: RunManifest = read_toml(&run.join(Self::FILE))
            .with_context(|| format!("{} is not a run directory", run.display()))?;
        ensure!(m.schema_version == crate::config::SCHEMA_VERSION, "unsupported manifest schema {}", m.schema_version);
        m.config.validate()?;
        Ok(m)
    }

    pub fn save(&self, run: &Path) -> Result<()> {
        write_toml(&run.join(Self::FILE), self)
    }

    pub fn set_stage(&mut self, name: &str, record: StageRecord) {
        self.stages.insert(name.to_string(), record);
    }

    /// Path of a recorded artifact, if the stage finished.
    pub fn artifact(&self, run: &Path, stage: &str, name: &str) -> Option<PathBuf> {
        let s = self.stages.get(stage)?;
        (s.status == StageStatus::Done).then(|| s.artifacts.get(name).map(|p| run.join(p)))?
    }
}

// ---------------------------------------------------------------------------------------
// weights

const WEIGHTS_MAGIC: &[u8; 4] = b"NASW";
const WEIGHTS_VERSION: u32 = 1;

/// Little-endian layout: magic `NASW`, u32 version, u32 value width in bytes (4 or 8),
/// u32 tensor count; per tensor u32 name length, UTF-8 name, u32 rank, u64 dims, values.
pub fn write_weights<T: Real>(path: &Path, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            match T::BYTES {
                4 => buf.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
                _ => buf.extend_from_slice(&v.f64().to_le_bytes()),
            }
        }
    }
    atomic_write(path, &buf)
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        ensure!(self.0.len() >= n, "truncated file");
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into()?))
    }
}

pub fn read_weights<T: Real>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut c = Cursor(&bytes);
    ensure!(c.take(4)? == WEIGHTS_MAGIC, "{} is not a weights file", path.display());
    ensure!(c.u32()? == WEIGHTS_VERSION, "unsupported weights version");
    let width = c.u32()? as usize;
    ensure!(width == T::BYTES, "weights stored as {width}-byte values, expected {}", T::BYTES);
    let n = c.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let v = match width {
                4 => f32::from_le_bytes(c.take(4)?.try_into()?) as f64,
                _ => f64::from_le_bytes(c.take(8)?.try_into()?),
            };
            data.push(T::of(v));
        }
        out.push((name, Tensor::new(&shape, data)?));
    }
    ensure!(c.0.is_empty(), "trailing bytes in {}", path.display());
    Ok(out)
}

// ---------------------------------------------------------------------------------------
// genotype and DOT

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenotypeFile {
    pub schema_version: u32,
    pub genotype: Genotype,
}

pub fn write_genotype(path: &Path, g: &Genotype) -> Result<()> {
    write_toml(
        path,
        &GenotypeFile {
            schema_version: crate::config::SCHEMA_VERSION,
            genotype: g.clone(),
        },
    )
}

pub fn read_genotype(path: &Path) -> Result<Genotype> {
    let f: GenotypeFile = read_toml(path)?;
    ensure!(f.schema_version == crate::config::SCHEMA_VERSION, "unsupported genotype schema {}", f.schema_version);
    Ok(f.genotype)
}

fn cell_node_label(topo: &Topology, v: usize) -> String {
    let ni = topo.cell.num_input_nodes;
    if v < ni {
        format!("in{v}")
    } else {
        format!("b{}", v - ni)
    }
}

/// One cell as a graph; every kept edge carries its op name as label.
pub fn cell_dot(topo: &Topology, kind: CellKind, cell: &CellGenotype) -> String {
    let mut s = format!("digraph cell_{} {{\n  rankdir=LR;\n", kind.name());
    for v in 0..topo.cell.num_nodes() {
        let shape = if topo.cell.is_input(v) { "box" } else { "ellipse" };
        s += &format!("  n{v} [label=\"{}\", shape={shape}];\n", cell_node_label(topo, v));
    }
    for e in &cell.edges {
        s += &format!("  n{} -> n{} [label=\"{}\"];\n", e.from, e.to, e.op.name());
    }
    s += "}\n";
    s
}

/// The kept part of the network; reduction nodes are drawn as boxes.
pub fn network_dot(topo: &Topology, g: &Genotype) -> String {
    let mut s = String::from("digraph network {\n  rankdir=LR;\n");
    for &v in &g.network.nodes {
        let node = &topo.network.nodes[v];
        let shape = if node.reduction { "box" } else { "ellipse" };
        s += &format!("  n{v} [label=\"{} ({}ch)\", shape={shape}];\n", node.name, node.width);
    }
    for &(u, v) in &g.network.edges {
        s += &format!("  n{u} -> n{v};\n");
    }
    s += "}\n";
    s
}

/// Edges `(from, to, label)` of a graph written by [`cell_dot`] or [`network_dot`]; the
/// label is empty for unlabelled edges.
pub fn parse_dot_edges(text: &str) -> Result<Vec<(usize, usize, String)>> {
    let node = |t: &str| -> Result<usize> {
        t.trim()
            .strip_prefix('n')
            .and_then(|n| n.parse().ok())
            .with_context(|| format!("bad node id `{t}`"))
    };
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim().trim_end_matches(';');
        let Some((lhs, rest)) = line.split_once("->") else { continue };
        let (rhs, attrs) = match rest.split_once('[') {
            Some((r, a)) => (r, a.trim_end_matches(']')),
            None => (rest, ""),
        };
        let label = match attrs.split_once("label=\"") {
            Some((_, l)) => l.split('"').next().unwrap_or("").to_string(),
            None => String::new(),
        };
        out.push((node(lhs)?, node(rhs)?, label));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------------------
// CSV and JSONL

fn write_csv<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    atomic_write(path, &w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)
}

pub fn read_csv<D: DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize().map(|x| x.map_err(Into::into)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyCsvRow {
    pub epoch: usize,
    pub mean_entropy: f64,
    pub min_entropy: f64,
    pub max_entropy: f64,
}

pub fn write_entropy_csv(path: &Path, trace: &EntropyTrace) -> Result<()> {
    write_csv(
        path,
        trace.rows.iter().map(|r| EntropyCsvRow {
            epoch: r.epoch,
            mean_entropy: r.mean,
            min_entropy: r.min,
            max_entropy: r.max,
        }),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochCsvRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_miou: f64,
    pub mean_entropy: Option<f64>,
    pub arch_updated: bool,
}

pub fn write_epoch_csv(path: &Path, logs: &[EpochLog]) -> Result<()> {
    write_csv(
        path,
        logs.iter().map(|l| EpochCsvRow {
            epoch: l.epoch,
            train_loss: l.train_loss,
            valid_miou: l.valid_miou,
            mean_entropy: l.mean_entropy,
            arch_updated: l.arch_updated,
        }),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCsvRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub fn write_metrics_csv(path: &Path, report: &EvalReport) -> Result<()> {
    write_csv(
        path,
        report.points.iter().map(|p| PrCsvRow {
            threshold: p.threshold,
            precision: p.precision,
            recall: p.recall,
            tp: p.tp,
            fp: p.fp,
            fn_: p.fn_,
        }),
    )
}

pub fn write_rows<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    write_csv(path, rows)
}

/// Appends records and flushes, so a killed run keeps every finished line.
pub fn append_jsonl<S: Serialize>(path: &Path, records: &[S]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    for r in records {
        let mut line = serde_json::to_string(r)?;
        line.push('\n');
        f.write_all(line.as_bytes())?;
    }
    f.sync_data()?;
    Ok(())
}

/// Every complete line; a torn last line from an interrupted write is dropped.
pub fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    let f = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let lines: Vec<String> = BufReader::new(f).lines().collect::<std::io::Result<_>>()?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => bail!("{} line {}: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------------------
// dataset cache

const TILES_MAGIC: &[u8; 4] = b"NAST";

/// Little-endian layout: magic `NAST`, u32 version 1, u64 count, u64 height, u64 width,
/// then per patch `H * W` f32 pixels followed by `H * W` u8 labels.
pub fn write_tiles(path: &Path, split: &DatasetSplit) -> Result<()> {
    let hw = split.height * split.width;
    let mut buf = Vec::with_capacity(24 + split.len() * hw * 5);
    buf.extend_from_slice(TILES_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    for v in [split.len(), split.height, split.width] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for p in &split.patches {
        for &v in &p.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&p.mask);
    }
    atomic_write(path, &buf)
}

pub fn read_tiles(path: &Path, role: SplitRole, seed: u64) -> Result<DatasetSplit> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .read_to_end(&mut bytes)?;
    let mut c = Cursor(&bytes);
    ensure!(c.take(4)? == TILES_MAGIC && c.u32()? == 1, "{} is not a tile file", path.display());
    let (n, height, width) = (c.u64()? as usize, c.u64()? as usize, c.u64()? as usize);
    let hw = height * width;
    let mut patches = Vec::with_capacity(n);
    for _ in 0..n {
        let image = c
            .take(4 * hw)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let mask = c.take(hw)?.to_vec();
        patches.push(Patch { image, mask });
    }
    ensure!(c.0.is_empty(), "trailing bytes in {}", path.display());
    Ok(DatasetSplit {
        role,
        seed,
        height,
        width,
        patches,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileIndexEntry {
    pub role: SplitRole,
    pub file: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileIndex {
    pub schema_version: u32,
    pub run_seed: u64,
    pub data: crate::config::DataSection,
    pub splits: Vec<TileIndexEntry>,
}
