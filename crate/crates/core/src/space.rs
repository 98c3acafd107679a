//! Symbolic search spaces: the candidate operation list, the cell DAG template and the
//! network DAG template, plus source-to-sink path enumeration for dense networks.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::OpKind;

pub const DEFAULT_PATH_CAP: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub name: String,
    pub ops: Vec<OpKind>,
}

impl SearchSpace {
    pub fn new(name: impl Into<String>, ops: Vec<OpKind>) -> Result<Self> {
        let s = Self { name: name.into(), ops };
        s.validate()?;
        Ok(s)
    }

    /// Dilated and separable 3x3/5x5 convolutions, 3x3 pools, skip and zero.
    pub fn base() -> Self {
        Self {
            name: "base".into(),
            ops: vec![
                OpKind::DilConv(3),
                OpKind::DilConv(5),
                OpKind::SepConv(3),
                OpKind::SepConv(5),
                OpKind::AvgPool,
                OpKind::MaxPool,
                OpKind::Skip,
                OpKind::Zero,
            ],
        }
    }

    /// Plain, depthwise and spatially split convolutions at 3/5/7, skip and cut.
    pub fn large() -> Self {
        let mut ops = Vec::new();
        for family in [OpKind::Conv as fn(u8) -> OpKind, OpKind::DepthConv, OpKind::SplitConv] {
            for k in [3, 5, 7] {
                ops.push(family(k));
            }
        }
        ops.push(OpKind::Skip);
        ops.push(OpKind::Cut);
        Self {
            name: "large".into(),
            ops,
        }
    }

    /// `"base"`, `"large"`, or a comma-separated list of operation names.
    pub fn from_name(kind: &str) -> Result<Self> {
        match kind {
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            other if other.contains(',') || other.parse::<OpKind>().is_ok() => {
                let ops = other
                    .split(',')
                    .map(|s| s.trim().parse::<OpKind>())
                    .collect::<Result<Vec<_>>>()?;
                Self::new("custom", ops)
            }
            other => Err(Error::Unknown {
                what: "operation space",
                name: other.into(),
                valid: "base, large, or a comma-separated operation list".into(),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ops.is_empty() {
            return Err(Error::InvalidTemplate("operation space is empty".into()));
        }
        for (i, a) in self.ops.iter().enumerate() {
            if self.ops[..i].contains(a) {
                return Err(Error::InvalidTemplate(format!("duplicate operation {a}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn index_of(&self, op: OpKind) -> Option<usize> {
        self.ops.iter().position(|&o| o == op)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStyle {
    Darts,
    Resnext,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Towers {
    pub count: usize,
    pub depth: usize,
}

/// DAG over the nodes of a cell: `num_input_nodes` inputs followed by `num_blocks` blocks.
/// Edge `(i, j)` feeds node `j` from node `i`, always with `i < j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellTemplate {
    pub style: CellStyle,
    pub num_blocks: usize,
    pub num_input_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub towers: Option<Towers>,
    pub reduction: bool,
}

impl CellTemplate {
    /// Every block is fed by all input nodes and all earlier blocks.
    pub fn darts(num_blocks: usize, num_input_nodes: usize) -> Result<Self> {
        if num_blocks == 0 || num_input_nodes == 0 {
            return Err(Error::InvalidTemplate("a cell needs at least one block and one input".into()));
        }
        let mut edges = Vec::new();
        for b in 0..num_blocks {
            let j = num_input_nodes + b;
            for i in 0..j {
                edges.push((i, j));
            }
        }
        Ok(Self {
            style: CellStyle::Darts,
            num_blocks,
            num_input_nodes,
            edges,
            towers: None,
            reduction: false,
        })
    }

    /// `count` parallel towers of `depth` single-input blocks over one input node; tower
    /// ends are summed with a residual connection.
    pub fn resnext(count: usize, depth: usize) -> Result<Self> {
        if count == 0 || depth == 0 {
            return Err(Error::InvalidTemplate("resnext cell needs towers of positive depth".into()));
        }
        let mut edges = Vec::new();
        for t in 0..count {
            for d in 0..depth {
                let j = 1 + t * depth + d;
                let i = if d == 0 { 0 } else { j - 1 };
                edges.push((i, j));
            }
        }
        edges.sort_by_key(|&(i, j)| (j, i));
        Ok(Self {
            style: CellStyle::Resnext,
            num_blocks: count * depth,
            num_input_nodes: 1,
            edges,
            towers: Some(Towers { count, depth }),
            reduction: false,
        })
    }

    pub fn build(style: CellStyle, num_blocks: usize, num_input_nodes: usize) -> Result<Self> {
        match style {
            CellStyle::Darts => Self::darts(num_blocks, num_input_nodes),
            CellStyle::Resnext => {
                if num_input_nodes != 1 {
                    return Err(Error::InvalidTemplate("resnext cells take exactly one input node".into()));
                }
                Self::resnext(num_blocks, 2)
            }
        }
    }

    pub fn as_reduction(&self) -> Self {
        Self {
            reduction: true,
            ..self.clone()
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_input_nodes + self.num_blocks
    }

    pub fn is_input(&self, node: usize) -> bool {
        node < self.num_input_nodes
    }

    /// Indices into `edges` of the edges entering `node`, in edge order.
    pub fn incoming(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, &(_, j))| j == node)
            .map(|(e, _)| e)
            .collect()
    }

    pub fn edge_index(&self, from: usize, to: usize) -> Option<usize> {
        self.edges.iter().position(|&e| e == (from, to))
    }

    /// Nodes whose outputs form the cell output: every block for DARTS cells, tower ends for
    /// ResNeXt cells.
    pub fn output_nodes(&self) -> Vec<usize> {
        match (self.style, self.towers) {
            (CellStyle::Resnext, Some(t)) => (0..t.count).map(|k| self.num_input_nodes + k * t.depth + t.depth - 1).collect(),
            _ => (self.num_input_nodes..self.num_nodes()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_cell_edges(self, &self.edges)?;
        for b in 0..self.num_blocks {
            let j = self.num_input_nodes + b;
            let inc = self.incoming(j).len();
            match self.style {
                CellStyle::Darts if inc != j => {
                    return Err(Error::InvalidTemplate(format!(
                        "darts block node {j} must be fed by all {j} earlier nodes, found {inc}"
                    )))
                }
                CellStyle::Resnext if inc != 1 => {
                    return Err(Error::InvalidTemplate(format!(
                        "resnext block node {j} must have exactly one input edge, found {inc}"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Structural checks shared by templates and decoded/mutated cells: `i < j`, endpoints in
/// range, targets are blocks, no duplicates, every block fed at least once, and for ResNeXt
/// exactly once.
pub fn validate_cell_edges(cell: &CellTemplate, edges: &[(usize, usize)]) -> Result<()> {
    let n = cell.num_nodes();
    for (k, &(i, j)) in edges.iter().enumerate() {
        if i >= j || j >= n || j < cell.num_input_nodes {
            return Err(Error::InvalidTemplate(format!("cell edge ({i}, {j}) is not a forward edge into a block")));
        }
        if edges[..k].contains(&(i, j)) {
            return Err(Error::InvalidTemplate(format!("duplicate cell edge ({i}, {j})")));
        }
    }
    for j in cell.num_input_nodes..n {
        let inc = edges.iter().filter(|e| e.1 == j).count();
        if inc == 0 {
            return Err(Error::InvalidTemplate(format!("block node {j} has no input edge")));
        }
        if cell.style == CellStyle::Resnext && inc != 1 {
            return Err(Error::InvalidTemplate(format!("resnext block node {j} has {inc} input edges")));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetTopology {
    Unet,
    Unetpp,
    Chain,
}

/// A cell slot in the network. `level` is the resolution divisor exponent relative to the
/// stem output (resolution `H / 2^level`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetNode {
    pub name: String,
    pub level: usize,
    pub width: usize,
    pub reduction: bool,
}

impl NetNode {
    /// Level of the tensors the cell consumes.
    pub fn input_level(&self) -> usize {
        self.level - usize::from(self.reduction)
    }
}

/// Fixed stem: `cells` stride-2 conv cells in front of the searched body.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub cells: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkTemplate {
    pub topology: NetTopology,
    pub base_channels: usize,
    pub nodes: Vec<NetNode>,
    pub edges: Vec<(usize, usize)>,
    pub stem: Option<StemSpec>,
}

impl NetworkTemplate {
    /// `depth` is the number of encoder levels for `unet`, the number of grid levels for
    /// `unetpp`, and the number of cells for `chain`.
    pub fn build(topology: NetTopology, depth: usize, base_channels: usize, stem: Option<StemSpec>) -> Result<Self> {
        if base_channels == 0 {
            return Err(Error::InvalidTemplate("base_channels must be positive".into()));
        }
        let width = |level: usize| base_channels << level;
        let node = |name: String, level: usize, reduction: bool| NetNode {
            name,
            level,
            width: width(level),
            reduction,
        };
        let (nodes, edges) = match topology {
            NetTopology::Chain => {
                if depth == 0 {
                    return Err(Error::InvalidTemplate("chain needs at least one cell".into()));
                }
                let nodes = (0..depth).map(|i| node(format!("cell_{i}"), 0, false)).collect();
                let edges = (1..depth).map(|i| (i - 1, i)).collect();
                (nodes, edges)
            }
            NetTopology::Unet => {
                if depth < 2 {
                    return Err(Error::InvalidTemplate("unet depth must be >= 2".into()));
                }
                // enc_1..enc_D, bottleneck, dec_{D-1}..dec_0
                let mut nodes = Vec::new();
                for l in 1..=depth {
                    nodes.push(node(format!("enc_{l}"), l, true));
                }
                nodes.push(node("bottleneck".into(), depth, false));
                for l in (0..depth).rev() {
                    nodes.push(node(format!("dec_{l}"), l, false));
                }
                let enc = |l: usize| l - 1;
                let bott = depth;
                let dec = |l: usize| depth + depth - l;
                let mut edges = Vec::new();
                for l in 1..depth {
                    edges.push((enc(l), enc(l + 1)));
                }
                edges.push((enc(depth), bott));
                edges.push((bott, dec(depth - 1)));
                for l in (0..depth - 1).rev() {
                    edges.push((dec(l + 1), dec(l)));
                }
                for l in 1..depth {
                    edges.push((enc(l), dec(l)));
                }
                edges.sort_by_key(|&(u, v)| (v, u));
                (nodes, edges)
            }
            NetTopology::Unetpp => {
                if depth < 2 {
                    return Err(Error::InvalidTemplate("unet++ needs at least 2 levels".into()));
                }
                // node (d, k) for d + k < depth, ordered by column k then level d
                let mut coords = Vec::new();
                for k in 0..depth {
                    for d in 0..depth - k {
                        coords.push((d, k));
                    }
                }
                let idx = |d: usize, k: usize| coords.iter().position(|&c| c == (d, k)).unwrap();
                let nodes = coords
                    .iter()
                    .map(|&(d, k)| node(format!("x_{d}_{k}"), d, k == 0 && d > 0))
                    .collect();
                let mut edges = Vec::new();
                for &(d, k) in &coords {
                    let v = idx(d, k);
                    if k == 0 {
                        if d > 0 {
                            edges.push((idx(d - 1, 0), v));
                        }
                    } else {
                        for kk in 0..k {
                            edges.push((idx(d, kk), v));
                        }
                        edges.push((idx(d + 1, k - 1), v));
                    }
                }
                edges.sort_by_key(|&(u, v)| (v, u));
                (nodes, edges)
            }
        };
        let t = Self {
            topology,
            base_channels,
            nodes,
            edges,
            stem,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn stem_factor(&self) -> usize {
        1 << self.stem.map_or(0, |s| s.cells)
    }

    pub fn max_level(&self) -> usize {
        self.nodes.iter().map(|n| n.level).max().unwrap_or(0)
    }

    pub fn incoming(&self, v: usize) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, &(_, t))| t == v)
            .map(|(e, _)| e)
            .collect()
    }

    pub fn successors(&self, u: usize) -> Vec<usize> {
        let mut s: Vec<usize> = self.edges.iter().filter(|e| e.0 == u).map(|e| e.1).collect();
        s.sort_unstable();
        s
    }

    pub fn edge_index(&self, u: usize, v: usize) -> Option<usize> {
        self.edges.iter().position(|&e| e == (u, v))
    }

    pub fn sources(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&v| !self.edges.iter().any(|e| e.1 == v)).collect()
    }

    pub fn sinks(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&v| !self.edges.iter().any(|e| e.0 == v)).collect()
    }

    pub fn source(&self) -> usize {
        self.sources()[0]
    }

    pub fn sink(&self) -> usize {
        self.sinks()[0]
    }

    /// Kahn order; `None` when the edge set has a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        topo_order(self.nodes.len(), &self.edges)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::InvalidTemplate("network has no nodes".into()));
        }
        for (k, &(u, v)) in self.edges.iter().enumerate() {
            if u >= n || v >= n || u == v {
                return Err(Error::InvalidTemplate(format!("bad network edge ({u}, {v})")));
            }
            if self.edges[..k].contains(&(u, v)) {
                return Err(Error::InvalidTemplate(format!("duplicate network edge ({u}, {v})")));
            }
        }
        if self.topological_order().is_none() {
            return Err(Error::InvalidTemplate("network graph has a cycle".into()));
        }
        let (src, snk) = (self.sources(), self.sinks());
        if src.len() != 1 || snk.len() != 1 {
            return Err(Error::InvalidTemplate(format!(
                "network needs exactly one source and one sink, found {} and {}",
                src.len(),
                snk.len()
            )));
        }
        check_reachability(n, &self.edges, src[0], snk[0])?;
        for (v, node) in self.nodes.iter().enumerate() {
            if node.reduction && node.level == 0 {
                return Err(Error::InvalidTemplate(format!("reduction node {} at level 0", node.name)));
            }
            let want = node.input_level();
            if v == src[0] && want != 0 {
                return Err(Error::InvalidTemplate("source cell must consume the stem resolution".into()));
            }
            for e in self.incoming(v) {
                let u = &self.nodes[self.edges[e].0];
                let ok = if node.reduction { u.level == want } else { u.level >= want };
                if !ok {
                    return Err(Error::InvalidTemplate(format!(
                        "edge {} -> {}: level {} cannot feed a cell consuming level {want}",
                        u.name, node.name, u.level
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every simple source-to-sink path, lexicographically ordered by node index.
    pub fn enumerate_paths(&self, cap: usize) -> Result<Vec<Vec<usize>>> {
        enumerate_paths(self.nodes.len(), &self.edges, self.source(), self.sink(), cap)
    }
}

pub(crate) fn topo_order(n: usize, edges: &[(usize, usize)]) -> Option<Vec<usize>> {
    let mut indeg = vec![0usize; n];
    for &(_, v) in edges {
        indeg[v] += 1;
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &(a, b) in edges {
            if a == u {
                indeg[b] -= 1;
                if indeg[b] == 0 {
                    queue.push_back(b);
                }
            }
        }
    }
    (order.len() == n).then_some(order)
}

fn reach(n: usize, edges: &[(usize, usize)], start: usize, forward: bool) -> Vec<bool> {
    let mut seen = vec![false; n];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(u) = stack.pop() {
        for &(a, b) in edges {
            let (from, to) = if forward { (a, b) } else { (b, a) };
            if from == u && !seen[to] {
                seen[to] = true;
                stack.push(to);
            }
        }
    }
    seen
}

/// Checks that all nodes in `0..n` lie on some `source -> sink` route.
pub(crate) fn check_reachability(n: usize, edges: &[(usize, usize)], source: usize, sink: usize) -> Result<()> {
    let fwd = reach(n, edges, source, true);
    let bwd = reach(n, edges, sink, false);
    if let Some(v) = (0..n).find(|&v| !fwd[v] || !bwd[v]) {
        return Err(Error::InvalidTemplate(format!("node {v} is not on a source-to-sink route")));
    }
    Ok(())
}

pub fn enumerate_paths(
    n: usize,
    edges: &[(usize, usize)],
    source: usize,
    sink: usize,
    cap: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut succ = vec![Vec::new(); n];
    for &(u, v) in edges {
        succ[u].push(v);
    }
    for s in &mut succ {
        s.sort_unstable();
    }
    let mut out = Vec::new();
    let mut path = vec![source];
    fn dfs(
        u: usize,
        sink: usize,
        succ: &[Vec<usize>],
        path: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
        cap: usize,
    ) -> Result<()> {
        if u == sink {
            if out.len() == cap {
                return Err(Error::PathCap { cap });
            }
            out.push(path.clone());
            return Ok(());
        }
        for &v in &succ[u] {
            if path.contains(&v) {
                continue;
            }
            path.push(v);
            dfs(v, sink, succ, path, out, cap)?;
            path.pop();
        }
        Ok(())
    }
    dfs(source, sink, &succ, &mut path, &mut out, cap)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Normal,
    Reduce,
}

impl CellKind {
    pub const BOTH: [CellKind; 2] = [CellKind::Normal, CellKind::Reduce];

    pub fn index(self) -> usize {
        match self {
            CellKind::Normal => 0,
            CellKind::Reduce => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Normal => "normal",
            CellKind::Reduce => "reduce",
        }
    }
}

/// One `(network, cell, operation space)` combination.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub name: String,
    pub cell: CellTemplate,
    pub network: NetworkTemplate,
    pub space: SearchSpace,
}

impl Topology {
    pub const PRESETS: [&'static str; 4] = ["resnext-unet", "darts-unet", "darts-unetpp", "chain"];

    /// Named presets. `depth` overrides the preset network depth.
    pub fn preset(name: &str, depth: Option<usize>, base_channels: usize) -> Result<Self> {
        let (cell, network, space) = match name {
            "resnext-unet" => (
                CellTemplate::resnext(4, 2)?,
                NetworkTemplate::build(NetTopology::Unet, depth.unwrap_or(2), base_channels, None)?,
                SearchSpace::large(),
            ),
            "darts-unet" => (
                CellTemplate::darts(4, 2)?,
                NetworkTemplate::build(NetTopology::Unet, depth.unwrap_or(2), base_channels, None)?,
                SearchSpace::base(),
            ),
            "darts-unetpp" => (
                CellTemplate::darts(4, 2)?,
                NetworkTemplate::build(
                    NetTopology::Unetpp,
                    depth.unwrap_or(4),
                    base_channels,
                    Some(StemSpec { cells: 2 }),
                )?,
                SearchSpace::base(),
            ),
            "chain" => (
                CellTemplate::darts(4, 2)?,
                NetworkTemplate::build(NetTopology::Chain, depth.unwrap_or(3), base_channels, None)?,
                SearchSpace::base(),
            ),
            other => {
                return Err(Error::Unknown {
                    what: "topology",
                    name: other.into(),
                    valid: Self::PRESETS.join(", "),
                })
            }
        };
        Ok(Self {
            name: name.to_string(),
            cell,
            network,
            space,
        })
    }

    pub fn with_space(mut self, space: SearchSpace) -> Self {
        self.space = space;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        self.cell.validate()?;
        self.network.validate()
    }

    pub fn cell_for(&self, kind: CellKind) -> CellTemplate {
        match kind {
            CellKind::Normal => self.cell.clone(),
            CellKind::Reduce => self.cell.as_reduction(),
        }
    }

    pub fn has_reduction(&self) -> bool {
        self.network.nodes.iter().any(|n| n.reduction)
    }

    pub fn node_kind(&self, v: usize) -> CellKind {
        if self.network.nodes[v].reduction {
            CellKind::Reduce
        } else {
            CellKind::Normal
        }
    }

    /// Total input downsampling factor the input height/width must be divisible by.
    pub fn resolution_divisor(&self) -> usize {
        self.network.stem_factor() << self.network.max_level()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent path count by memoized DFS over successor lists.
    fn count_paths(n: usize, edges: &[(usize, usize)], src: usize, snk: usize) -> usize {
        fn go(u: usize, snk: usize, edges: &[(usize, usize)], memo: &mut Vec<Option<usize>>) -> usize {
            if u == snk {
                return 1;
            }
            if let Some(c) = memo[u] {
                return c;
            }
            let c = edges.iter().filter(|e| e.0 == u).map(|e| go(e.1, snk, edges, memo)).sum();
            memo[u] = Some(c);
            c
        }
        go(src, snk, edges, &mut vec![None; n])
    }

    #[test]
    fn operation_spaces() {
        assert_eq!(SearchSpace::base().len(), 8);
        let large = SearchSpace::large();
        assert_eq!(large.len(), 11);
        let names: Vec<String> = large.ops.iter().map(|o| o.name()).collect();
        assert_eq!(
            names,
            [
                "conv2d_1", "conv2d_2", "conv2d_3", "depthconv2d_1", "depthconv2d_2", "depthconv2d_3",
                "splitconv2d_1", "splitconv2d_2", "splitconv2d_3", "skip", "cut"
            ]
        );
        assert_eq!(SearchSpace::from_name("skip").unwrap().len(), 1);
        let err = SearchSpace::from_name("huge").unwrap_err();
        assert!(alloc::format!("{err}").contains("base, large"));
        assert!(SearchSpace::from_name("skip,skip").is_err());
        assert!(SearchSpace::new("x", vec![]).is_err());
    }

    #[test]
    fn darts_cell_edge_counts() {
        assert_eq!(CellTemplate::darts(4, 2).unwrap().edges.len(), 14);
        assert_eq!(CellTemplate::darts(1, 2).unwrap().edges.len(), 2);
        CellTemplate::darts(4, 2).unwrap().validate().unwrap();
    }

    #[test]
    fn resnext_cell_single_inputs() {
        let c = CellTemplate::resnext(4, 2).unwrap();
        assert_eq!(c.edges.len(), 8);
        c.validate().unwrap();
        for b in 0..c.num_blocks {
            assert_eq!(c.incoming(c.num_input_nodes + b).len(), 1);
        }
        assert_eq!(c.output_nodes(), vec![2, 4, 6, 8]);
        assert!(CellTemplate::build(CellStyle::Resnext, 4, 2).is_err());
    }

    #[test]
    fn network_node_counts() {
        let pp = NetworkTemplate::build(NetTopology::Unetpp, 4, 16, None).unwrap();
        assert_eq!(pp.nodes.len(), 10);
        let u = NetworkTemplate::build(NetTopology::Unet, 2, 16, None).unwrap();
        assert_eq!(u.nodes.len(), 5);
        assert_eq!(u.nodes.iter().filter(|n| n.reduction).count(), 2);
        let c = NetworkTemplate::build(NetTopology::Chain, 3, 16, None).unwrap();
        assert_eq!((c.nodes.len(), c.edges.len()), (3, 2));
        assert!(NetworkTemplate::build(NetTopology::Unet, 1, 16, None).is_err());
    }

    #[test]
    fn unet_encoder_reduces_decoder_normal() {
        let u = NetworkTemplate::build(NetTopology::Unet, 3, 16, None).unwrap();
        for n in &u.nodes {
            assert_eq!(n.reduction, n.name.starts_with("enc"), "{}", n.name);
            assert_eq!(n.width, 16 << n.level);
        }
    }

    #[test]
    fn path_enumeration() {
        let c = NetworkTemplate::build(NetTopology::Chain, 3, 16, None).unwrap();
        assert_eq!(c.enumerate_paths(DEFAULT_PATH_CAP).unwrap(), vec![vec![0, 1, 2]]);
        let diamond = [(0, 1), (0, 2), (1, 3), (2, 3)];
        assert_eq!(enumerate_paths(4, &diamond, 0, 3, 100).unwrap().len(), 2);
        for levels in 2..=5 {
            let pp = NetworkTemplate::build(NetTopology::Unetpp, levels, 16, None).unwrap();
            let paths = pp.enumerate_paths(DEFAULT_PATH_CAP).unwrap();
            let oracle = count_paths(pp.nodes.len(), &pp.edges, pp.source(), pp.sink());
            assert_eq!(paths.len(), oracle);
            let mut sorted = paths.clone();
            sorted.sort();
            assert_eq!(sorted, paths);
            if levels == 4 {
                assert!(paths.len() < 100, "{}", paths.len());
            }
        }
        let pp = NetworkTemplate::build(NetTopology::Unetpp, 5, 16, None).unwrap();
        assert_eq!(pp.enumerate_paths(3), Err(Error::PathCap { cap: 3 }));
    }

    #[test]
    fn presets_validate() {
        for name in Topology::PRESETS {
            let t = Topology::preset(name, None, 16).unwrap();
            t.validate().unwrap();
            assert!(t.network.topological_order().is_some());
        }
        assert!(Topology::preset("vgg", None, 16).is_err());
        assert_eq!(Topology::preset("darts-unetpp", None, 16).unwrap().resolution_divisor(), 32);
    }

    #[test]
    fn validation_rejects_cycles_and_orphans() {
        let mut t = NetworkTemplate::build(NetTopology::Chain, 3, 16, None).unwrap();
        t.edges.push((2, 0));
        assert!(t.validate().is_err());
        let mut t = NetworkTemplate::build(NetTopology::Chain, 3, 16, None).unwrap();
        t.edges.pop();
        assert!(t.validate().is_err());
    }
}
