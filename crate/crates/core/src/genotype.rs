//! Discrete architectures: one op per kept cell edge, plus the kept part of the network DAG.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::OpKind;
use crate::space::{check_reachability, validate_cell_edges, CellKind, NetworkTemplate, Topology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GeneEdge {
    pub from: usize,
    pub to: usize,
    pub op: OpKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGenotype {
    pub edges: Vec<GeneEdge>,
}

impl CellGenotype {
    pub fn new(mut edges: Vec<GeneEdge>) -> Self {
        edges.sort_by_key(|e| (e.to, e.from));
        Self { edges }
    }

    pub fn op_at(&self, from: usize, to: usize) -> Option<OpKind> {
        self.edges.iter().find(|e| e.from == from && e.to == to).map(|e| e.op)
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.from, e.to)).collect()
    }

    pub fn is_parameter_free(&self) -> bool {
        self.edges.iter().all(|e| e.op.is_parameter_free())
    }
}

/// Kept network nodes and edges (template indices) and the paths they were merged from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkGenotype {
    pub nodes: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    #[serde(default)]
    pub paths: Vec<Vec<usize>>,
}

impl NetworkGenotype {
    /// The whole template network.
    pub fn full(net: &NetworkTemplate) -> Self {
        Self {
            nodes: (0..net.nodes.len()).collect(),
            edges: net.edges.clone(),
            paths: Vec::new(),
        }
    }

    /// Union of the nodes and edges of `paths`.
    pub fn from_paths(paths: Vec<Vec<usize>>) -> Self {
        let mut nodes: Vec<usize> = paths.iter().flatten().copied().collect();
        nodes.sort_unstable();
        nodes.dedup();
        let mut edges: Vec<(usize, usize)> = paths.iter().flat_map(|p| p.windows(2).map(|w| (w[0], w[1]))).collect();
        edges.sort_by_key(|&(u, v)| (v, u));
        edges.dedup();
        Self { nodes, edges, paths }
    }

    pub fn validate(&self, net: &NetworkTemplate) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGenotype(m));
        for w in self.nodes.windows(2) {
            if w[0] >= w[1] {
                return bad("network nodes must be strictly increasing".into());
            }
        }
        if self.nodes.last().is_some_and(|&v| v >= net.nodes.len()) {
            return bad("network node index out of range".into());
        }
        let (src, snk) = (net.source(), net.sink());
        if !self.nodes.contains(&src) || !self.nodes.contains(&snk) {
            return bad("network genotype must keep the template source and sink".into());
        }
        for &(u, v) in &self.edges {
            if net.edge_index(u, v).is_none() {
                return bad(format!("network edge ({u}, {v}) is not in the template"));
            }
            if !self.nodes.contains(&u) || !self.nodes.contains(&v) {
                return bad(format!("network edge ({u}, {v}) touches a dropped node"));
            }
        }
        // reachability over the kept subgraph, in local indices
        let local = |x: usize| self.nodes.iter().position(|&n| n == x).unwrap();
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|&(u, v)| (local(u), local(v))).collect();
        check_reachability(self.nodes.len(), &edges, local(src), local(snk))
            .map_err(|e| Error::InvalidGenotype(format!("{e}")))
    }

    /// Kept incoming edges of `v` as predecessor node ids, ascending.
    pub fn preds(&self, v: usize) -> Vec<usize> {
        let mut p: Vec<usize> = self.edges.iter().filter(|e| e.1 == v).map(|e| e.0).collect();
        p.sort_unstable();
        p
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub topology: String,
    pub normal: CellGenotype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduce: Option<CellGenotype>,
    pub network: NetworkGenotype,
}

impl Genotype {
    /// Every template edge carrying `op`, full network.
    pub fn uniform(topo: &Topology, op: OpKind) -> Self {
        let cell = CellGenotype::new(
            topo.cell
                .edges
                .iter()
                .map(|&(from, to)| GeneEdge { from, to, op })
                .collect(),
        );
        Self {
            topology: topo.name.clone(),
            reduce: topo.has_reduction().then(|| cell.clone()),
            normal: cell,
            network: NetworkGenotype::full(&topo.network),
        }
    }

    pub fn cell(&self, kind: CellKind) -> &CellGenotype {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduce => self.reduce.as_ref().unwrap_or(&self.normal),
        }
    }

    pub fn cell_mut(&mut self, kind: CellKind) -> &mut CellGenotype {
        match kind {
            CellKind::Normal => &mut self.normal,
            CellKind::Reduce => self.reduce.as_mut().unwrap_or(&mut self.normal),
        }
    }

    /// Cell kinds this genotype carries, normal first.
    pub fn kinds(&self) -> Vec<CellKind> {
        if self.reduce.is_some() {
            CellKind::BOTH.to_vec()
        } else {
            alloc::vec![CellKind::Normal]
        }
    }

    pub fn validate(&self, topo: &Topology) -> Result<()> {
        if self.topology != topo.name {
            return Err(Error::InvalidGenotype(format!(
                "genotype is for topology `{}`, not `{}`",
                self.topology, topo.name
            )));
        }
        if topo.has_reduction() != self.reduce.is_some() {
            return Err(Error::InvalidGenotype(
                "a reduce cell is required exactly when the network has reduction nodes".into(),
            ));
        }
        for kind in self.kinds() {
            let cell = self.cell(kind);
            for w in cell.edges.windows(2) {
                if (w[0].to, w[0].from) >= (w[1].to, w[1].from) {
                    return Err(Error::InvalidGenotype(format!("{} cell edges are unsorted", kind.name())));
                }
            }
            for e in &cell.edges {
                if topo.cell.edge_index(e.from, e.to).is_none() {
                    return Err(Error::InvalidGenotype(format!(
                        "{} cell edge ({}, {}) is not in the template",
                        kind.name(),
                        e.from,
                        e.to
                    )));
                }
            }
            validate_cell_edges(&topo.cell, &cell.pairs())
                .map_err(|e| Error::InvalidGenotype(format!("{} cell: {e}", kind.name())))?;
        }
        self.network.validate(&topo.network)
    }

    pub fn is_parameter_free(&self) -> bool {
        self.kinds().into_iter().all(|k| self.cell(k).is_parameter_free())
    }
}
