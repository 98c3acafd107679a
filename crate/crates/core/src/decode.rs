//! Extracting discrete genotypes from architecture parameters.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::genotype::{CellGenotype, GeneEdge, Genotype, NetworkGenotype};
use crate::ops::OpKind;
use crate::space::{CellKind, NetworkTemplate, Topology, DEFAULT_PATH_CAP};
use crate::supernet::ArchParams;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn decode_edge_argmax(alpha_row: &[f64], ops: &[OpKind]) -> OpKind {
    ops[argmax(alpha_row)]
}

/// Op choice and strength `max_o softmax(alpha)_o * gamma_weight`, where `gamma_weight` is
/// the edge's gamma already normalized over its sibling edges.
pub fn decode_edge_normalized(alpha_row: &[f64], gamma_weight: f64, ops: &[OpKind]) -> (OpKind, f64) {
    let p = crate::arch_optim::softmax64(alpha_row);
    let i = argmax(&p);
    (ops[i], p[i] * gamma_weight)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeChoice {
    pub edge: usize,
    pub op: OpKind,
    pub strength: f64,
}

/// Keeps the `k` strongest edges of one block (ties to the lower edge id). Edges decoded to
/// a zero op are dropped while any other edge is available; when every edge decoded to a
/// zero op, the strongest is kept with `fallback(edge)` as its op.
pub fn select_topk(choices: &[EdgeChoice], k: usize, fallback: impl Fn(usize) -> Option<OpKind>) -> Vec<EdgeChoice> {
    let mut sorted = choices.to_vec();
    sorted.sort_by(|a, b| b.strength.total_cmp(&a.strength).then(a.edge.cmp(&b.edge)));
    let live: Vec<EdgeChoice> = sorted.iter().copied().filter(|c| !c.op.is_zero()).collect();
    let mut kept: Vec<EdgeChoice> = if live.is_empty() {
        sorted
            .first()
            .map(|c| EdgeChoice {
                op: fallback(c.edge).unwrap_or(c.op),
                ..*c
            })
            .into_iter()
            .collect()
    } else {
        live.into_iter().take(k.max(1)).collect()
    };
    kept.sort_by_key(|c| c.edge);
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellDecode {
    /// Every template edge with its argmax op.
    Argmax,
    /// Top-K edges per block ranked by the largest op weight.
    Topk,
    /// Top-K edges per block ranked by op weight times normalized gamma.
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathDecode {
    /// Keep the whole network.
    Full,
    Viterbi,
    /// All paths scoring at least `mu + 3 sigma`.
    Multipath,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub cell: CellDecode,
    pub k: usize,
    pub paths: PathDecode,
    pub path_cap: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            cell: CellDecode::Normalized,
            k: 2,
            paths: PathDecode::Multipath,
            path_cap: DEFAULT_PATH_CAP,
        }
    }
}

pub fn decode_cell(topo: &Topology, arch: &ArchParams, kind: CellKind, mode: CellDecode, k: usize) -> Result<CellGenotype> {
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    let ops = &topo.space.ops;
    let cell = &topo.cell;
    let mut edges = Vec::new();
    for b in 0..cell.num_blocks {
        let incoming = &arch.gamma_groups[b];
        let gamma = arch.gamma_weights(kind, b);
        let choices: Vec<EdgeChoice> = incoming
            .iter()
            .zip(&gamma)
            .map(|(&e, &g)| {
                let w = arch.op_weights(kind, e);
                let i = argmax(&w);
                let strength = if mode == CellDecode::Normalized { w[i] * g } else { w[i] };
                EdgeChoice {
                    edge: e,
                    op: ops[i],
                    strength,
                }
            })
            .collect();
        let kept = match mode {
            CellDecode::Argmax => choices,
            CellDecode::Topk | CellDecode::Normalized => select_topk(&choices, k, |e| {
                let w = arch.op_weights(kind, e);
                let live: Vec<usize> = (0..ops.len()).filter(|&i| !ops[i].is_zero()).collect();
                live.iter().copied().max_by(|&a, &b| w[a].total_cmp(&w[b]).then(b.cmp(&a))).map(|i| ops[i])
            }),
        };
        for c in kept {
            let (from, to) = cell.edges[c.edge];
            edges.push(GeneEdge { from, to, op: c.op });
        }
    }
    Ok(CellGenotype::new(edges))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathScore {
    pub path: Vec<usize>,
    pub score: f64,
}

/// `ln` of the normalized beta weight of every network edge.
pub fn transition_log_probs(arch: &ArchParams) -> Vec<f64> {
    arch.beta_edge_weights().into_iter().map(libm::log).collect()
}

/// Path maximizing the summed log transition probability, by dynamic programming over
/// topological order. Ties keep the lower predecessor.
pub fn viterbi_best_path(log_probs: &[f64], net: &NetworkTemplate) -> Result<PathScore> {
    if log_probs.len() != net.edges.len() {
        return Err(invalid("one transition log-probability per network edge is required"));
    }
    let order = net.topological_order().ok_or_else(|| invalid("network has a cycle"))?;
    let n = net.nodes.len();
    let (src, snk) = (net.source(), net.sink());
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut back = vec![usize::MAX; n];
    best[src] = 0.0;
    for v in order {
        let mut inc = net.incoming(v);
        inc.sort_by_key(|&e| net.edges[e].0);
        for e in inc {
            let u = net.edges[e].0;
            let s = best[u] + log_probs[e];
            if s > best[v] {
                best[v] = s;
                back[v] = u;
            }
        }
    }
    if !best[snk].is_finite() {
        return Err(invalid("sink is unreachable with finite score"));
    }
    let mut path = vec![snk];
    let mut v = snk;
    while v != src {
        v = back[v];
        path.push(v);
    }
    path.reverse();
    Ok(PathScore { path, score: best[snk] })
}

/// Summed log-probability of a node path.
pub fn path_log_prob(path: &[usize], log_probs: &[f64], net: &NetworkTemplate) -> f64 {
    path.windows(2)
        .map(|w| log_probs[net.edge_index(w[0], w[1]).expect("path edge in template")])
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultipathResult {
    pub scores: Vec<PathScore>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub threshold: f64,
    /// Indices into `scores`.
    pub kept: Vec<usize>,
    /// Set when no path reached the threshold and the best one was kept instead.
    pub fallback: bool,
}

/// Applies the `score >= mu + 3 sigma` rule to raw scores. Returns `(kept, mean, std,
/// threshold, fallback)`.
pub fn select_paths(scores: &[f64]) -> (Vec<usize>, f64, f64, f64, bool) {
    let n = scores.len().max(1) as f64;
    let constant = scores.windows(2).all(|w| w[0] == w[1]);
    let (mean, std) = if constant {
        (scores.first().copied().unwrap_or(0.0), 0.0)
    } else {
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        (mean, num_traits::Float::sqrt(var))
    };
    let threshold = mean + 3.0 * std;
    let kept: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= threshold).collect();
    if kept.is_empty() && !scores.is_empty() {
        (vec![argmax(scores)], mean, std, threshold, true)
    } else {
        (kept, mean, std, threshold, false)
    }
}

/// Scores every source-to-sink path by its mean log transition probability and keeps those
/// at or above `mu + 3 sigma`, falling back to the best path.
pub fn multipath_decode(log_probs: &[f64], net: &NetworkTemplate, cap: usize) -> Result<MultipathResult> {
    if log_probs.len() != net.edges.len() {
        return Err(invalid("one transition log-probability per network edge is required"));
    }
    let paths = net.enumerate_paths(cap)?;
    let scores: Vec<PathScore> = paths
        .into_iter()
        .map(|path| {
            let len = path.len().saturating_sub(1).max(1) as f64;
            let score = path_log_prob(&path, log_probs, net) / len;
            PathScore { path, score }
        })
        .collect();
    let raw: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let (kept, mean, std, threshold, fallback) = select_paths(&raw);
    Ok(MultipathResult {
        scores,
        mean,
        std,
        threshold,
        kept,
        fallback,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub genotype: Genotype,
    pub viterbi: Option<PathScore>,
    pub multipath: Option<MultipathResult>,
}

pub fn decode_genotype(topo: &Topology, arch: &ArchParams, opts: &DecodeOptions) -> Result<Decoded> {
    arch.validate(topo)?;
    let normal = decode_cell(topo, arch, CellKind::Normal, opts.cell, opts.k)?;
    let reduce = match arch.reduce {
        Some(_) => Some(decode_cell(topo, arch, CellKind::Reduce, opts.cell, opts.k)?),
        None => None,
    };
    let lp = transition_log_probs(arch);
    let (network, viterbi, multipath) = match opts.paths {
        PathDecode::Full => (NetworkGenotype::full(&topo.network), None, None),
        PathDecode::Viterbi => {
            let best = viterbi_best_path(&lp, &topo.network)?;
            (NetworkGenotype::from_paths(vec![best.path.clone()]), Some(best), None)
        }
        PathDecode::Multipath => {
            let m = multipath_decode(&lp, &topo.network, opts.path_cap)?;
            let paths = m.kept.iter().map(|&i| m.scores[i].path.clone()).collect();
            (NetworkGenotype::from_paths(paths), None, Some(m))
        }
    };
    let genotype = Genotype {
        topology: topo.name.clone(),
        normal,
        reduce,
        network,
    };
    genotype.validate(topo)?;
    Ok(Decoded {
        genotype,
        viterbi,
        multipath,
    })
}
