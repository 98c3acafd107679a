//! Instantiating a [`Topology`] as a trainable network.
//!
//! A search network carries every candidate op on every cell edge and mixes them with
//! architecture weights; a discrete network carries the single op chosen by a
//! [`Genotype`]. Both share the layout below.
//!
//! * Stem: `stem.cells` stride-2 3x3 conv + norm blocks (or one stride-1 conv without a stem)
//!   mapping the input to `base_channels`.
//! * Each network node aggregates its predecessors: outputs are nearest-upsampled to the
//!   node's input level, weighted by the node's beta weights (search only), concatenated and
//!   reduced to the node width by `ReLU -> 1x1 conv -> norm`.
//! * DARTS cells take that tensor as node 0 and a "grandparent" as node 1: the aggregated
//!   input of the first predecessor (the stem output for the source), resampled to the input
//!   level with a 1x1 conv. All blocks are concatenated and reduced back to the node width.
//! * ResNeXt cells have a single input node; the tower ends are summed with a residual.
//! * Reduction cells run their input-node edges at stride 2.
//! * Head: `ReLU -> 1x1 conv + bias` to class logits, bilinear upsampling by the stem factor.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch_optim::{entropy, softmax64};
use crate::autograd::{Gradients, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::genotype::{Genotype, NetworkGenotype};
use crate::kernels::ConvGeom;
use crate::ops::OpKind;
use crate::params::{Init, ParamId, ParamStore};
use crate::space::{CellKind, CellStyle, Topology};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Fresh channel masks per forward when partial channels are on.
    Search,
    /// Full channels, no sampling.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Partial-channel divisor; 1 disables masking.
    pub pc_k: usize,
    pub edge_norm: bool,
    /// Alpha rows are simplex weights used directly instead of softmax logits.
    pub theta_mode: bool,
    /// Gamma and beta groups are kept on the simplex as well (only with `theta_mode`).
    pub edge_simplex: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            pc_k: 1,
            edge_norm: true,
            theta_mode: true,
            edge_simplex: true,
        }
    }
}

/// Per-channel keep mask of one edge; exactly `ceil(C / k)` entries are set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMask {
    pub edge: usize,
    pub keep: Vec<bool>,
    pub k: usize,
}

impl ChannelMask {
    pub fn sample<R: Rng>(edge: usize, channels: usize, k: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || k > channels {
            return Err(invalid(format!(
                "partial channel divisor {k} must be in 1..={channels}"
            )));
        }
        let m = channels.div_ceil(k);
        let mut keep = vec![false; channels];
        for i in index::sample(rng, channels, m) {
            keep[i] = true;
        }
        Ok(Self { edge, keep, k })
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&b| b).count()
    }
}

/// Weighted sum of `ops(x)` with `weights[k]` read from a rank-1 tape variable. Zero ops
/// contribute nothing and are not evaluated.
pub fn mixed_op_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    weights: Var,
    ops: &[OpKind],
    params: &[Vec<Var>],
    stride: usize,
) -> Result<Var> {
    if tape.shape(weights) != [ops.len()] || params.len() != ops.len() {
        return Err(Error::ShapeMismatch {
            context: "mixed op weights".into(),
            expected: vec![ops.len()],
            actual: tape.shape(weights).to_vec(),
        });
    }
    let mut terms = Vec::with_capacity(ops.len());
    for (k, op) in ops.iter().enumerate() {
        if op.is_zero() {
            continue;
        }
        let y = op.apply(tape, x, &params[k], stride)?;
        terms.push(tape.scale_by(y, weights, k)?);
    }
    if terms.is_empty() {
        return OpKind::Zero.apply(tape, x, &[], stride);
    }
    tape.add_n(&terms).map_err(|e| match e {
        Error::ShapeMismatch {
            context,
            expected,
            actual,
        } => Error::ShapeMismatch {
            context: format!(
                "{context} in mixed op over [{}]",
                ops.iter().map(|o| o.name()).collect::<Vec<_>>().join(", ")
            ),
            expected,
            actual,
        },
        other => other,
    })
}

/// `mixed(M x) + (1 - M) x` with a freshly sampled mask; `k == 1` is exactly
/// [`mixed_op_forward`].
#[allow(clippy::too_many_arguments)]
pub fn partial_channel_forward<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    x: Var,
    weights: Var,
    ops: &[OpKind],
    params: &[Vec<Var>],
    stride: usize,
    k: usize,
    rng: &mut R,
) -> Result<(Var, Option<ChannelMask>)> {
    let c = tape.shape(x).get(1).copied().unwrap_or(0);
    if k == 0 || k > c {
        return Err(invalid(format!("partial channel divisor {k} exceeds {c} channels")));
    }
    if k == 1 {
        return Ok((mixed_op_forward(tape, x, weights, ops, params, stride)?, None));
    }
    let mask = ChannelMask::sample(0, c, k, rng)?;
    let y = masked_mixed(tape, x, weights, ops, params, stride, &mask.keep)?;
    Ok((y, Some(mask)))
}

/// Deterministic core of [`partial_channel_forward`] for a given keep mask.
pub fn masked_mixed<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    weights: Var,
    ops: &[OpKind],
    params: &[Vec<Var>],
    stride: usize,
    keep: &[bool],
) -> Result<Var> {
    let xm = tape.mask_channels(x, keep)?;
    let y = mixed_op_forward(tape, xm, weights, ops, params, stride)?;
    let drop: Vec<bool> = keep.iter().map(|b| !b).collect();
    let rest = tape.mask_channels(x, &drop)?;
    let rest = tape.subsample(rest, stride)?;
    tape.add(y, rest)
}

/// `sum_i w_i o_i` with `weights` a rank-1 variable of already normalized edge weights, or a
/// plain sum without weights.
pub fn node_forward<T: Real>(tape: &mut Tape<T>, edge_outputs: &[Var], weights: Option<Var>) -> Result<Var> {
    if edge_outputs.is_empty() {
        return Err(invalid("node has no incoming edges"));
    }
    match weights {
        None => tape.add_n(edge_outputs),
        Some(w) => {
            let mut terms = Vec::with_capacity(edge_outputs.len());
            for (i, &o) in edge_outputs.iter().enumerate() {
                terms.push(tape.scale_by(o, w, i)?);
            }
            tape.add_n(&terms)
        }
    }
}

/// Architecture parameters of one cell type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellArch {
    /// One row of `|ops|` entries per template cell edge.
    pub alpha: Vec<Vec<f64>>,
    /// One entry per template cell edge.
    pub gamma: Vec<f64>,
}

/// Alpha/theta, gamma and beta, held in 64-bit regardless of the compute precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub theta_mode: bool,
    pub edge_simplex: bool,
    pub normal: CellArch,
    pub reduce: Option<CellArch>,
    /// One entry per template network edge.
    pub beta: Vec<f64>,
    /// Incoming cell-edge ids of each block.
    pub gamma_groups: Vec<Vec<usize>>,
    /// Incoming network-edge ids of each network node.
    pub beta_groups: Vec<Vec<usize>>,
}

/// Gradients in the layout of [`ArchParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ArchGrads {
    pub normal: CellArch,
    pub reduce: Option<CellArch>,
    pub beta: Vec<f64>,
}

impl ArchParams {
    pub fn init(topo: &Topology, theta_mode: bool, edge_simplex: bool) -> Self {
        let edge_simplex = theta_mode && edge_simplex;
        let n_ops = topo.space.len();
        let gamma_groups: Vec<Vec<usize>> = (0..topo.cell.num_blocks)
            .map(|b| topo.cell.incoming(topo.cell.num_input_nodes + b))
            .collect();
        let beta_groups: Vec<Vec<usize>> = (0..topo.network.nodes.len()).map(|v| topo.network.incoming(v)).collect();
        let fill = |n: usize, groups: &[Vec<usize>]| {
            let mut v = vec![0.0; n];
            if edge_simplex {
                for g in groups {
                    for &e in g {
                        v[e] = 1.0 / g.len() as f64;
                    }
                }
            }
            v
        };
        let row = if theta_mode { 1.0 / n_ops as f64 } else { 0.0 };
        let cell = CellArch {
            alpha: vec![vec![row; n_ops]; topo.cell.edges.len()],
            gamma: fill(topo.cell.edges.len(), &gamma_groups),
        };
        Self {
            theta_mode,
            edge_simplex,
            reduce: topo.has_reduction().then(|| cell.clone()),
            normal: cell,
            beta: fill(topo.network.edges.len(), &beta_groups),
            gamma_groups,
            beta_groups,
        }
    }

    pub fn cell(&self, kind: CellKind) -> &CellArch {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduce => self.reduce.as_ref().unwrap_or(&self.normal),
        }
    }

    pub fn kinds(&self) -> Vec<CellKind> {
        if self.reduce.is_some() {
            CellKind::BOTH.to_vec()
        } else {
            vec![CellKind::Normal]
        }
    }

    fn group_weights(&self, values: &[f64], group: &[usize]) -> Vec<f64> {
        let v: Vec<f64> = group.iter().map(|&e| values[e]).collect();
        if self.edge_simplex {
            v
        } else {
            softmax64(&v)
        }
    }

    /// Operation weights of one cell edge: theta itself or softmax(alpha).
    pub fn op_weights(&self, kind: CellKind, edge: usize) -> Vec<f64> {
        let row = &self.cell(kind).alpha[edge];
        if self.theta_mode {
            row.clone()
        } else {
            softmax64(row)
        }
    }

    /// Normalized gamma weights of the incoming edges of block `block`.
    pub fn gamma_weights(&self, kind: CellKind, block: usize) -> Vec<f64> {
        self.group_weights(&self.cell(kind).gamma, &self.gamma_groups[block])
    }

    /// Normalized beta weights of the incoming network edges of node `v`.
    pub fn beta_weights(&self, v: usize) -> Vec<f64> {
        self.group_weights(&self.beta, &self.beta_groups[v])
    }

    /// Normalized beta weight of every network edge.
    pub fn beta_edge_weights(&self) -> Vec<f64> {
        let mut out = vec![1.0; self.beta.len()];
        for g in &self.beta_groups {
            for (&e, w) in g.iter().zip(self.group_weights(&self.beta, g)) {
                out[e] = w;
            }
        }
        out
    }

    pub fn edge_entropies(&self) -> Vec<f64> {
        self.kinds()
            .into_iter()
            .flat_map(|k| (0..self.cell(k).alpha.len()).map(move |e| (k, e)))
            .map(|(k, e)| entropy(&self.op_weights(k, e)))
            .collect()
    }

    pub fn validate(&self, topo: &Topology) -> Result<()> {
        let n_ops = topo.space.len();
        let n_edges = topo.cell.edges.len();
        let check_simplex = |v: &[f64], what: &str| -> Result<()> {
            let s: f64 = v.iter().sum();
            if v.iter().any(|&x| !(x >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("{what} is not on the simplex (sum {s})")));
            }
            Ok(())
        };
        if (self.reduce.is_some()) != topo.has_reduction() {
            return Err(invalid("reduce-cell parameters present iff the network has reduction nodes"));
        }
        if self.beta.len() != topo.network.edges.len() || self.beta_groups.len() != topo.network.nodes.len() {
            return Err(invalid("beta does not match the network template"));
        }
        for kind in self.kinds() {
            let c = self.cell(kind);
            if c.alpha.len() != n_edges || c.gamma.len() != n_edges {
                return Err(invalid(format!("{} alpha/gamma do not match the cell template", kind.name())));
            }
            for (e, row) in c.alpha.iter().enumerate() {
                if row.len() != n_ops {
                    return Err(invalid(format!("{} alpha row {e} has {} entries, expected {n_ops}", kind.name(), row.len())));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("{} alpha row {e}", kind.name())));
                }
                if self.theta_mode {
                    check_simplex(row, &format!("{} theta row {e}", kind.name()))?;
                }
            }
            if self.edge_simplex {
                for (b, g) in self.gamma_groups.iter().enumerate() {
                    let v: Vec<f64> = g.iter().map(|&e| c.gamma[e]).collect();
                    check_simplex(&v, &format!("{} gamma group {b}", kind.name()))?;
                }
            }
        }
        if self.edge_simplex {
            for (v, g) in self.beta_groups.iter().enumerate().filter(|(_, g)| !g.is_empty()) {
                let w: Vec<f64> = g.iter().map(|&e| self.beta[e]).collect();
                check_simplex(&w, &format!("beta group of node {v}"))?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> ArchGrads {
        let z = |c: &CellArch| CellArch {
            alpha: c.alpha.iter().map(|r| vec![0.0; r.len()]).collect(),
            gamma: vec![0.0; c.gamma.len()],
        };
        ArchGrads {
            normal: z(&self.normal),
            reduce: self.reduce.as_ref().map(z),
            beta: vec![0.0; self.beta.len()],
        }
    }
}

#[derive(Clone, Debug)]
struct EdgeInst {
    from: usize,
    cell_edge: usize,
    ops: Vec<OpKind>,
    params: Vec<Vec<ParamId>>,
    stride: usize,
}

#[derive(Clone, Debug)]
enum GpSource {
    Stem,
    InputOf(usize),
}

#[derive(Clone, Debug)]
struct GpInst {
    source: GpSource,
    stride: usize,
    up: usize,
    params: [ParamId; 3],
}

#[derive(Clone, Debug)]
struct CellInst {
    node: usize,
    kind: CellKind,
    in_level: usize,
    preds: Vec<usize>,
    pre: [ParamId; 3],
    gp: Option<GpInst>,
    /// Incoming edges of each block, in block order.
    blocks: Vec<Vec<EdgeInst>>,
    combine: Option<[ParamId; 3]>,
}

/// Tape variables bound for one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    params: Vec<Var>,
    arch: Option<ArchVars>,
    /// Channel masks drawn during this pass, keyed by cell edge id.
    pub masks: Vec<ChannelMask>,
}

#[derive(Debug)]
struct ArchVars {
    /// `[kind][edge]` raw alpha leaves and their normalized weights.
    alpha: [Vec<Var>; 2],
    op_w: [Vec<Var>; 2],
    /// `[kind][block]` gamma leaves and weights, absent without edge normalization.
    gamma: [Vec<Option<(Var, Var)>>; 2],
    /// Per network node, absent for single-input nodes.
    beta: Vec<Option<(Var, Var)>>,
}

/// A search network (with [`ArchParams`]) or a discrete network built from a genotype.
#[derive(Clone, Debug)]
pub struct Network<T> {
    topology: Topology,
    config: NetConfig,
    params: ParamStore<T>,
    stem: Vec<[ParamId; 3]>,
    head: [ParamId; 2],
    cells: Vec<CellInst>,
    arch: Option<ArchParams>,
    network: NetworkGenotype,
    rng: ChaCha8Rng,
}

pub type SuperNet<T> = Network<T>;

fn conv1x1<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    cout: usize,
    cin: usize,
) -> [ParamId; 3] {
    [
        store.add(format!("{name}.w"), &[cout, cin, 1, 1], Init::KaimingUniform { fan_in: cin }, rng),
        store.add(format!("{name}.scale"), &[cout], Init::Ones, rng),
        store.add(format!("{name}.shift"), &[cout], Init::Zeros, rng),
    ]
}

/// Cell edges to instantiate: `(from, to, template edge id, candidate ops)`.
type EdgeSpec = Vec<(usize, usize, usize, Vec<OpKind>)>;

impl<T: Real> Network<T> {
    /// Search network over every template edge and every op in the space.
    pub fn supernet(topology: Topology, config: NetConfig, seed: u64) -> Result<Self> {
        let arch = ArchParams::init(&topology, config.theta_mode, config.edge_simplex);
        let spec: EdgeSpec = topology
            .cell
            .edges
            .iter()
            .enumerate()
            .map(|(e, &(i, j))| (i, j, e, topology.space.ops.clone()))
            .collect();
        let network = NetworkGenotype::full(&topology.network);
        Self::build(topology, config, seed, [spec.clone(), spec], network, Some(arch))
    }

    /// Discrete network: the genotype's ops on its kept edges and kept network nodes.
    pub fn discrete(topology: Topology, genotype: &Genotype, config: NetConfig, seed: u64) -> Result<Self> {
        genotype.validate(&topology)?;
        let spec = |kind: CellKind| -> EdgeSpec {
            genotype
                .cell(kind)
                .edges
                .iter()
                .map(|g| (g.from, g.to, topology.cell.edge_index(g.from, g.to).unwrap(), vec![g.op]))
                .collect()
        };
        let specs = [spec(CellKind::Normal), spec(CellKind::Reduce)];
        Self::build(topology, config, seed, specs, genotype.network.clone(), None)
    }

    fn build(
        topology: Topology,
        config: NetConfig,
        seed: u64,
        specs: [EdgeSpec; 2],
        network: NetworkGenotype,
        arch: Option<ArchParams>,
    ) -> Result<Self> {
        topology.validate()?;
        if config.in_channels == 0 || config.num_classes < 2 {
            return Err(invalid("need at least one input channel and two classes"));
        }
        if config.pc_k == 0 {
            return Err(invalid("partial channel divisor must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = &topology.network;
        let base = net.base_channels;

        let mut stem = Vec::new();
        let n_stem = net.stem.map_or(1, |s| s.cells.max(1));
        for i in 0..n_stem {
            let cin = if i == 0 { config.in_channels } else { base };
            stem.push([
                store.add(format!("stem.{i}.w"), &[base, cin, 3, 3], Init::KaimingUniform { fan_in: cin * 9 }, &mut rng),
                store.add(format!("stem.{i}.scale"), &[base], Init::Ones, &mut rng),
                store.add(format!("stem.{i}.shift"), &[base], Init::Zeros, &mut rng),
            ]);
        }

        let order = net.topological_order().ok_or_else(|| invalid("network template has a cycle"))?;
        let tmpl = &topology.cell;
        let mut cells = Vec::new();
        for v in order.into_iter().filter(|v| network.nodes.contains(v)) {
            let node = &net.nodes[v];
            let kind = topology.node_kind(v);
            let width = node.width;
            let in_level = node.input_level();
            let preds = if arch.is_some() {
                net.incoming(v).into_iter().map(|e| net.edges[e].0).collect()
            } else {
                network.preds(v)
            };
            let in_width = if preds.is_empty() {
                base
            } else {
                preds.iter().map(|&u| net.nodes[u].width).sum()
            };
            let pre = conv1x1(&mut store, &mut rng, &format!("cell{v}.pre"), width, in_width);
            let gp = if tmpl.style == CellStyle::Darts {
                let (source, src_level, src_width) = match preds.first() {
                    None => (GpSource::Stem, 0, base),
                    Some(&u) => (GpSource::InputOf(u), net.nodes[u].input_level(), net.nodes[u].width),
                };
                Some(GpInst {
                    source,
                    stride: 1 << in_level.saturating_sub(src_level),
                    up: 1 << src_level.saturating_sub(in_level),
                    params: conv1x1(&mut store, &mut rng, &format!("cell{v}.gp"), width, src_width),
                })
            } else {
                None
            };
            let mut blocks = vec![Vec::new(); tmpl.num_blocks];
            for (from, to, cell_edge, ops) in &specs[kind.index()] {
                let stride = if node.reduction && tmpl.is_input(*from) { 2 } else { 1 };
                let params = ops
                    .iter()
                    .map(|op| {
                        op.param_specs(width)
                            .into_iter()
                            .map(|(suffix, shape, init)| {
                                store.add(format!("cell{v}.e{from}_{to}.{op}.{suffix}"), &shape, init, &mut rng)
                            })
                            .collect()
                    })
                    .collect();
                blocks[to - tmpl.num_input_nodes].push(EdgeInst {
                    from: *from,
                    cell_edge: *cell_edge,
                    ops: ops.clone(),
                    params,
                    stride,
                });
            }
            let combine = (tmpl.style == CellStyle::Darts)
                .then(|| conv1x1(&mut store, &mut rng, &format!("cell{v}.out"), width, width * tmpl.num_blocks));
            cells.push(CellInst {
                node: v,
                kind,
                in_level,
                preds,
                pre,
                gp,
                blocks,
                combine,
            });
        }

        let sink_width = net.nodes[net.sink()].width;
        let head = [
            store.add(
                "head.w".into(),
                &[config.num_classes, sink_width, 1, 1],
                Init::KaimingUniform { fan_in: sink_width },
                &mut rng,
            ),
            store.add("head.b".into(), &[config.num_classes], Init::Zeros, &mut rng),
        ];

        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
        mask_rng.set_stream(1);
        Ok(Self {
            topology,
            config,
            params: store,
            stem,
            head,
            cells,
            arch,
            network,
            rng: mask_rng,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn arch(&self) -> Option<&ArchParams> {
        self.arch.as_ref()
    }

    pub fn arch_mut(&mut self) -> Option<&mut ArchParams> {
        self.arch.as_mut()
    }

    pub fn set_arch(&mut self, arch: ArchParams) -> Result<()> {
        if self.arch.is_none() {
            return Err(invalid("a discrete network has no architecture parameters"));
        }
        arch.validate(&self.topology)?;
        self.arch = Some(arch);
        Ok(())
    }

    /// Network nodes and edges this instance was built over.
    pub fn network_genotype(&self) -> &NetworkGenotype {
        &self.network
    }

    pub fn is_search(&self) -> bool {
        self.arch.is_some()
    }

    /// Reseeds the mask sampler.
    pub fn reseed_masks(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.rng.set_stream(1);
    }

    /// Validates an `(N, C, H, W)` input batch against the network.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let div = self.topology.resolution_divisor();
        match *shape {
            [_, c, h, w] if c == self.config.in_channels && h % div == 0 && w % div == 0 && h > 0 && w > 0 => Ok(()),
            _ => Err(Error::ShapeMismatch {
                context: format!(
                    "network input: {} channel(s), height and width divisible by {div}",
                    self.config.in_channels
                ),
                expected: vec![0, self.config.in_channels, div, div],
                actual: shape.to_vec(),
            }),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, images: &Tensor<T>, mode: Mode) -> Result<Forward> {
        self.check_input(images.shape())?;
        let pv = self.params.bind(tape);
        let p = |id: ParamId| pv[id.index()];
        let net = &self.topology.network;
        let x = tape.leaf(images.clone(), false);

        let mut s = x;
        let stem_stride = if net.stem.is_some() { 2 } else { 1 };
        for (i, ids) in self.stem.iter().enumerate() {
            if i > 0 {
                s = tape.relu(s);
            }
            s = tape.conv2d(s, p(ids[0]), ConvGeom::same(3, 3, stem_stride, 1, 1))?;
            s = tape.instance_norm(s, p(ids[1]), p(ids[2]))?;
        }
        let stem_out = s;

        let arch = match &self.arch {
            Some(a) => Some(bind_arch(tape, a, self.config.edge_norm)?),
            None => None,
        };
        let n_nodes = net.nodes.len();
        let mut outs: Vec<Option<Var>> = vec![None; n_nodes];
        let mut inputs: Vec<Option<Var>> = vec![None; n_nodes];
        let mut masks = Vec::new();
        let pc_k = if mode == Mode::Search { self.config.pc_k } else { 1 };

        for cell in &self.cells {
            let v = cell.node;
            let ctx = |e: Error| with_context(e, &net.nodes[v].name);
            // aggregate predecessors
            let mut ins = Vec::new();
            if cell.preds.is_empty() {
                ins.push(stem_out);
            }
            for (i, &u) in cell.preds.iter().enumerate() {
                let out_u = outs[u].ok_or_else(|| invalid(format!("node {u} used before it was computed")))?;
                let up = 1 << (net.nodes[u].level - cell.in_level);
                let mut t = tape.upsample_nearest(out_u, up).map_err(ctx)?;
                if let Some(Some((_, w))) = arch.as_ref().map(|a| a.beta[v]) {
                    t = tape.scale_by(t, w, i).map_err(ctx)?;
                }
                ins.push(t);
            }
            let cat = tape.concat(&ins).map_err(ctx)?;
            let s1 = conv_norm(tape, cat, &cell.pre, &p, 1, 1).map_err(ctx)?;
            inputs[v] = Some(s1);

            let mut states = vec![s1];
            if let Some(gp) = &cell.gp {
                let src = match gp.source {
                    GpSource::Stem => stem_out,
                    GpSource::InputOf(u) => inputs[u].ok_or_else(|| invalid("grandparent input missing"))?,
                };
                let s0 = conv_norm(tape, src, &gp.params, &p, gp.stride, gp.up).map_err(ctx)?;
                states.push(s0);
            }
            let kind = cell.kind.index();
            for (b, edges) in cell.blocks.iter().enumerate() {
                let mut eouts = Vec::with_capacity(edges.len());
                for e in edges {
                    let xin = states[e.from];
                    let pvars: Vec<Vec<Var>> = e.params.iter().map(|ids| ids.iter().map(|&id| p(id)).collect()).collect();
                    let y = match &arch {
                        None => e.ops[0].apply(tape, xin, &pvars[0], e.stride),
                        Some(a) => {
                            let w = a.op_w[kind][e.cell_edge];
                            if pc_k > 1 {
                                let mut mask = ChannelMask::sample(e.cell_edge, tape.shape(xin)[1], pc_k, &mut self.rng)
                                    .map_err(ctx)?;
                                let y = masked_mixed(tape, xin, w, &e.ops, &pvars, e.stride, &mask.keep);
                                mask.edge = e.cell_edge;
                                masks.push(mask);
                                y
                            } else {
                                mixed_op_forward(tape, xin, w, &e.ops, &pvars, e.stride)
                            }
                        }
                    }
                    .map_err(ctx)?;
                    eouts.push(y);
                }
                let gw = arch.as_ref().and_then(|a| a.gamma[kind][b]).map(|(_, w)| w);
                states.push(node_forward(tape, &eouts, gw).map_err(ctx)?);
            }
            let out = match &cell.combine {
                Some(ids) => {
                    let blocks = tape.concat(&states[self.topology.cell.num_input_nodes..]).map_err(ctx)?;
                    conv_norm(tape, blocks, ids, &p, 1, 1).map_err(ctx)?
                }
                None => {
                    let mut terms: Vec<Var> = self.topology.cell.output_nodes().into_iter().map(|n| states[n]).collect();
                    let stride = if net.nodes[v].reduction { 2 } else { 1 };
                    terms.push(tape.subsample(s1, stride).map_err(ctx)?);
                    tape.add_n(&terms).map_err(ctx)?
                }
            };
            outs[v] = Some(out);
        }

        let sink = outs[net.sink()].ok_or_else(|| invalid("sink node was not computed"))?;
        let r = tape.relu(sink);
        let logits = tape.conv2d(r, p(self.head[0]), ConvGeom::same(1, 1, 1, 1, 1))?;
        let logits = tape.channel_bias(logits, p(self.head[1]))?;
        let logits = tape.upsample_bilinear(logits, net.stem_factor())?;
        Ok(Forward {
            logits,
            params: pv,
            arch,
            masks,
        })
    }

    /// Adds the weight gradients of a pass into the parameter store.
    pub fn accumulate_grads(&mut self, fw: &Forward, grads: &mut Gradients<T>) {
        self.params.accumulate(&fw.params, grads);
    }

    /// Architecture gradients of a pass, `None` for discrete networks.
    pub fn arch_grads(&self, fw: &Forward, grads: &Gradients<T>) -> Option<ArchGrads> {
        let (arch, vars) = (self.arch.as_ref()?, fw.arch.as_ref()?);
        let mut g = arch.zero_grads();
        let read = |v: Var| grads.get(v).map(|t| t.data().iter().map(|x| x.f64()).collect::<Vec<f64>>());
        for kind in arch.kinds() {
            let k = kind.index();
            let cell = match kind {
                CellKind::Normal => &mut g.normal,
                CellKind::Reduce => g.reduce.as_mut().unwrap(),
            };
            for (e, &leaf) in vars.alpha[k].iter().enumerate() {
                if let Some(row) = read(leaf) {
                    cell.alpha[e] = row;
                }
            }
            for (b, pair) in vars.gamma[k].iter().enumerate() {
                if let Some(vals) = pair.and_then(|(leaf, _)| read(leaf)) {
                    for (&e, x) in arch.gamma_groups[b].iter().zip(vals) {
                        cell.gamma[e] = x;
                    }
                }
            }
        }
        for (v, pair) in vars.beta.iter().enumerate() {
            if let Some(vals) = pair.and_then(|(leaf, _)| read(leaf)) {
                for (&e, x) in arch.beta_groups[v].iter().zip(vals) {
                    g.beta[e] = x;
                }
            }
        }
        Some(g)
    }
}

fn with_context(e: Error, node: &str) -> Error {
    match e {
        Error::ShapeMismatch {
            context,
            expected,
            actual,
        } => Error::ShapeMismatch {
            context: format!("cell {node}: {context}"),
            expected,
            actual,
        },
        other => other,
    }
}

/// `ReLU -> [nearest up] -> 1x1 conv (stride) -> norm`.
fn conv_norm<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    ids: &[ParamId; 3],
    p: &impl Fn(ParamId) -> Var,
    stride: usize,
    up: usize,
) -> Result<Var> {
    let r = tape.relu(x);
    let r = tape.upsample_nearest(r, up)?;
    let y = tape.conv2d(r, p(ids[0]), ConvGeom::same(1, 1, stride, 1, 1))?;
    tape.instance_norm(y, p(ids[1]), p(ids[2]))
}

fn bind_arch<T: Real>(tape: &mut Tape<T>, a: &ArchParams, edge_norm: bool) -> Result<ArchVars> {
    let leaf = |tape: &mut Tape<T>, v: &[f64]| tape.leaf(Tensor::from_fn(&[v.len()], |i| T::of(v[i])), true);
    let normalize = |tape: &mut Tape<T>, x: Var, direct: bool| if direct { Ok(x) } else { tape.softmax(x) };
    let mut alpha: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
    let mut op_w: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
    let mut gamma: [Vec<Option<(Var, Var)>>; 2] = [Vec::new(), Vec::new()];
    for kind in a.kinds() {
        let k = kind.index();
        let cell = a.cell(kind);
        for row in &cell.alpha {
            let l = leaf(tape, row);
            alpha[k].push(l);
            op_w[k].push(normalize(tape, l, a.theta_mode)?);
        }
        for g in &a.gamma_groups {
            if !edge_norm || g.len() < 2 {
                gamma[k].push(None);
                continue;
            }
            let vals: Vec<f64> = g.iter().map(|&e| cell.gamma[e]).collect();
            let l = leaf(tape, &vals);
            gamma[k].push(Some((l, normalize(tape, l, a.edge_simplex)?)));
        }
    }
    let mut beta = Vec::new();
    for g in &a.beta_groups {
        if g.len() < 2 {
            beta.push(None);
            continue;
        }
        let vals: Vec<f64> = g.iter().map(|&e| a.beta[e]).collect();
        let l = leaf(tape, &vals);
        beta.push(Some((l, normalize(tape, l, a.edge_simplex)?)));
    }
    Ok(ArchVars {
        alpha,
        op_w,
        gamma,
        beta,
    })
}

/// Every tensor name of the network in construction order.
pub fn param_names<T: Real>(net: &Network<T>) -> Vec<String> {
    net.params.iter().map(|p| p.name.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::Topology;

    fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn skip_cut_equal_weights_halves() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(input(&[1, 3, 4, 4], 1), true);
        let a = tape.leaf(Tensor::from_fn(&[2], |_| 0.3), true);
        let w = tape.softmax(a).unwrap();
        let y = mixed_op_forward(&mut tape, x, w, &[OpKind::Skip, OpKind::Cut], &[vec![], vec![]], 1).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(tape.value(x).data()) {
            assert_eq!(*o, i / 2.0);
        }
    }

    #[test]
    fn node_forward_weights() {
        let mut tape = Tape::<f64>::new();
        let o1 = tape.leaf(Tensor::full(&[1, 1, 2, 2], 3.0), false);
        let o2 = tape.leaf(Tensor::full(&[1, 1, 2, 2], 6.0), false);
        let g = tape.leaf(Tensor::new(&[2], vec![2f64.ln(), 0.0]).unwrap(), true);
        let w = tape.softmax(g).unwrap();
        let y = node_forward(&mut tape, &[o1, o2], Some(w)).unwrap();
        assert!((tape.value(y).data()[0] - (2.0 + 2.0)).abs() < 1e-12);
        let single = node_forward(&mut tape, &[o1], None).unwrap();
        assert_eq!(single, o1);
        assert!(node_forward(&mut tape, &[], None).is_err());
    }

    #[test]
    fn masks_have_exact_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in 1..20 {
            for k in 1..=c {
                assert_eq!(ChannelMask::sample(0, c, k, &mut rng).unwrap().count(), c.div_ceil(k));
            }
        }
        assert!(ChannelMask::sample(0, 4, 5, &mut rng).is_err());
    }

    #[test]
    fn arch_init_and_validation() {
        let t = Topology::preset("darts-unet", None, 4).unwrap();
        let a = ArchParams::init(&t, true, true);
        a.validate(&t).unwrap();
        assert_eq!(a.normal.alpha.len(), 14);
        assert!(a.reduce.is_some());
        let l = ArchParams::init(&t, false, true);
        assert!(!l.edge_simplex);
        assert_eq!(l.op_weights(CellKind::Normal, 0), vec![0.125; 8]);
    }

    #[test]
    fn every_preset_forwards_to_input_resolution() {
        for name in Topology::PRESETS {
            let t = Topology::preset(name, Some(2), 4).unwrap();
            let div = t.resolution_divisor();
            let side = div.max(8);
            let cfg = NetConfig {
                edge_norm: t.cell.style == CellStyle::Darts,
                pc_k: 2,
                ..NetConfig::default()
            };
            let mut net = Network::<f32>::supernet(t, cfg, 1).unwrap();
            let mut tape = Tape::new();
            let x = input(&[2, 1, side, side], 2).cast::<f32>();
            let fw = net.forward(&mut tape, &x, Mode::Search).unwrap();
            assert_eq!(tape.shape(fw.logits), &[2, 2, side, side], "{name}");
            assert!(tape.value(fw.logits).is_finite());
        }
    }

    #[test]
    fn rejects_bad_input_shape() {
        let t = Topology::preset("darts-unet", Some(2), 4).unwrap();
        let mut net = Network::<f32>::supernet(t, NetConfig::default(), 1).unwrap();
        let mut tape = Tape::new();
        let err = net.forward(&mut tape, &Tensor::zeros(&[1, 1, 6, 6]), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }
}
