//! Symbolic upper bound on the memory a discrete network needs for one training step.
//!
//! Parameters are counted five times: stored value, its copy on the tape, the tape
//! gradient, the accumulated gradient and the momentum buffer. Activations count every
//! tape value plus auxiliary buffers (normalization statistics, pooling argmax, softmax
//! probabilities) for one sample, doubled to cover gradients, times the batch.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::genotype::Genotype;
use crate::ops::OpKind;
use crate::space::{CellKind, CellStyle, Topology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub param_bytes: usize,
    pub activation_bytes: usize,
}

impl MemoryEstimate {
    pub fn total(&self) -> usize {
        self.param_bytes + self.activation_bytes
    }
}

/// Tape elements (values and auxiliary buffers) of one op for one sample.
fn op_elems(op: OpKind, c: usize, s_in: usize, s_out: usize) -> usize {
    let norm = 2 * c * s_out + c;
    match op {
        OpKind::Conv(_) => c * s_in + c * s_out + norm,
        OpKind::SepConv(_) | OpKind::DepthConv(_) | OpKind::DilConv(_) | OpKind::SplitConv(_) => {
            c * s_in + 2 * c * s_out + norm
        }
        OpKind::MaxPool => 2 * c * s_out,
        OpKind::AvgPool | OpKind::Skip | OpKind::Zero | OpKind::Cut => c * s_out,
    }
}

fn op_params(op: OpKind, c: usize) -> usize {
    op.param_specs(c)
        .iter()
        .map(|(_, shape, _)| shape.iter().product::<usize>())
        .sum()
}

/// `input_shape` is `(C, H, W)` of one sample; `bytes` the size of one value.
pub fn estimate_memory(
    topo: &Topology,
    genotype: &Genotype,
    input_shape: [usize; 3],
    batch: usize,
    num_classes: usize,
    bytes: usize,
) -> Result<MemoryEstimate> {
    genotype.validate(topo)?;
    let [cin, h, w] = input_shape;
    let div = topo.resolution_divisor();
    if h % div != 0 || w % div != 0 || cin == 0 {
        return Err(invalid("input resolution must be divisible by the network's total downsampling"));
    }
    let net = &topo.network;
    let base = net.base_channels;
    let factor = net.stem_factor();
    let area = |level: usize| (h / factor >> level) * (w / factor >> level);
    let mut params = 0usize;
    let mut act = 2 * cin * h * w; // batch tensor and its tape leaf

    // stem
    let n_stem = net.stem.map_or(1, |s| s.cells.max(1));
    let mut side = (h, w);
    for i in 0..n_stem {
        let c_prev = if i == 0 { cin } else { base };
        params += base * c_prev * 9 + 2 * base;
        if i > 0 {
            act += base * side.0 * side.1;
        }
        if net.stem.is_some() {
            side = (side.0 / 2, side.1 / 2);
        }
        act += base * side.0 * side.1 + 2 * base * side.0 * side.1 + base;
    }

    let cell = &topo.cell;
    for &v in &genotype.network.nodes {
        let node = &net.nodes[v];
        let kind = if node.reduction { CellKind::Reduce } else { CellKind::Normal };
        let c = node.width;
        let (s_in, s_out) = (area(node.input_level()), area(node.level));
        let preds = genotype.network.preds(v);
        let in_c: usize = if preds.is_empty() {
            base
        } else {
            preds.iter().map(|&u| net.nodes[u].width).sum()
        };
        // upsample, scale, concat, relu of the aggregated inputs; then 1x1 conv and norm
        params += c * in_c + 2 * c;
        act += 4 * in_c * s_in + 3 * c * s_in + c;
        if cell.style == CellStyle::Darts {
            let (src_c, src_area) = match preds.first() {
                None => (base, area(0)),
                Some(&u) => (net.nodes[u].width, area(net.nodes[u].input_level())),
            };
            params += c * src_c + 2 * c;
            act += src_c * src_area + src_c * src_area.max(s_in) + 3 * c * s_in + c;
        }
        let g = genotype.cell(kind);
        for e in &g.edges {
            let s_e = if cell.is_input(e.from) { s_in } else { s_out };
            params += op_params(e.op, c);
            act += op_elems(e.op, c, s_e, s_out);
        }
        // one sum per block
        act += cell.num_blocks * c * s_out;
        match cell.style {
            CellStyle::Darts => {
                params += c * c * cell.num_blocks + 2 * c;
                act += 2 * cell.num_blocks * c * s_out + 3 * c * s_out + c;
            }
            CellStyle::Resnext => act += 2 * c * s_out,
        }
    }

    // head: relu, conv, bias, upsample, then the loss probabilities and targets
    let sink = net.nodes[net.sink()].width;
    params += num_classes * sink + num_classes;
    act += sink * area(0) + 2 * num_classes * area(0) + 2 * num_classes * h * w + h * w + 1;

    Ok(MemoryEstimate {
        param_bytes: 5 * params * bytes,
        activation_bytes: 2 * act * bytes * batch,
    })
}

/// Parameter count of the genotype's network, for reporting.
pub fn parameter_count(topo: &Topology, genotype: &Genotype, in_channels: usize, num_classes: usize) -> Result<usize> {
    let div = topo.resolution_divisor();
    let est = estimate_memory(topo, genotype, [in_channels, div, div], 1, num_classes, 1)?;
    Ok(est.param_bytes / 5)
}

/// Genotypes whose estimate exceeds `budget` bytes, by index.
pub fn over_budget(estimates: &[MemoryEstimate], budget: usize) -> Vec<usize> {
    (0..estimates.len()).filter(|&i| estimates[i].total() > budget).collect()
}
