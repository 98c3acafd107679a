//! Architecture-parameter optimizers: exponentiated gradient on the simplex, a plain
//! logit-gradient baseline, the delayed start gate and the entropy indicator.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::supernet::{ArchGrads, ArchParams, CellArch};

/// Positive entries are never pushed below this after an update.
pub const THETA_FLOOR: f64 = 1e-12;

/// `theta * exp(-eta * grad)`, renormalized. Exact zeros stay zero; positive entries are
/// floored at [`THETA_FLOOR`].
pub fn gaea_step(theta: &[f64], grad: &[f64], eta: f64) -> Result<Vec<f64>> {
    if theta.len() != grad.len() {
        return Err(invalid(alloc::format!(
            "theta row has {} entries but gradient has {}",
            theta.len(),
            grad.len()
        )));
    }
    if !(eta > 0.0) {
        return Err(invalid(alloc::format!("eta must be positive, got {eta}")));
    }
    if theta.iter().any(|&t| t < 0.0 || !t.is_finite()) || grad.iter().any(|g| !g.is_finite()) {
        return Err(invalid("theta must be finite and non-negative, gradient finite"));
    }
    // shift by the smallest exponent argument so exp never overflows; the shift cancels
    let g_min = theta
        .iter()
        .zip(grad)
        .filter(|(&t, _)| t > 0.0)
        .map(|(_, &g)| g)
        .fold(f64::INFINITY, f64::min);
    if !g_min.is_finite() {
        return Err(invalid("theta row is all zero and cannot be renormalized"));
    }
    let mut out: Vec<f64> = theta
        .iter()
        .zip(grad)
        .map(|(&t, &g)| {
            if t > 0.0 {
                (t * libm::exp(-eta * (g - g_min))).max(THETA_FLOOR)
            } else {
                0.0
            }
        })
        .collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    Ok(out)
}

/// `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * libm::log(p)).sum::<f64>()
}

pub fn arch_update_gate(epoch: usize, start_epoch: usize) -> bool {
    epoch >= start_epoch
}

/// `alpha - lr * grad`.
pub fn softmax_alpha_step(alpha: &[f64], grad: &[f64], lr: f64) -> Result<Vec<f64>> {
    if alpha.len() != grad.len() {
        return Err(invalid("alpha row and gradient lengths differ"));
    }
    if !(lr > 0.0) {
        return Err(invalid(alloc::format!("lr must be positive, got {lr}")));
    }
    Ok(alpha.iter().zip(grad).map(|(a, g)| a - lr * g).collect())
}

pub fn softmax64(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| libm::exp(v - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub epoch: usize,
    pub per_edge: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyTrace {
    pub rows: Vec<EntropyRow>,
}

impl EntropyTrace {
    pub fn record(&mut self, epoch: usize, arch: &ArchParams) {
        let per_edge = arch.edge_entropies();
        let n = per_edge.len().max(1) as f64;
        let mean = per_edge.iter().sum::<f64>() / n;
        let min = per_edge.iter().copied().fold(f64::INFINITY, f64::min);
        let max = per_edge.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.rows.push(EntropyRow {
            epoch,
            per_edge,
            mean,
            min,
            max,
        });
    }
}

/// Updates all architecture parameters from one gradient. Alpha rows use exponentiated
/// gradient in theta mode and a logit step otherwise; gamma/beta groups follow the same
/// rule when the params keep them on the simplex.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchOptimizer {
    pub lr: f64,
}

impl ArchOptimizer {
    pub fn step(&self, arch: &mut ArchParams, grads: &ArchGrads) -> Result<()> {
        let theta = arch.theta_mode;
        let simplex = arch.edge_simplex;
        let groups = arch.gamma_groups.clone();
        let step_cell = |cell: &mut CellArch, g: &CellArch| -> Result<()> {
            for (row, grow) in cell.alpha.iter_mut().zip(&g.alpha) {
                *row = if theta {
                    gaea_step(row, grow, self.lr)?
                } else {
                    softmax_alpha_step(row, grow, self.lr)?
                };
            }
            for group in &groups {
                step_group(&mut cell.gamma, &g.gamma, group, simplex, self.lr)?;
            }
            Ok(())
        };
        step_cell(&mut arch.normal, &grads.normal)?;
        if let (Some(r), Some(g)) = (arch.reduce.as_mut(), grads.reduce.as_ref()) {
            step_cell(r, g)?;
        }
        for group in arch.beta_groups.clone() {
            step_group(&mut arch.beta, &grads.beta, &group, simplex, self.lr)?;
        }
        Ok(())
    }
}

fn step_group(values: &mut [f64], grads: &[f64], group: &[usize], simplex: bool, lr: f64) -> Result<()> {
    if group.len() < 2 {
        return Ok(());
    }
    let v: Vec<f64> = group.iter().map(|&e| values[e]).collect();
    let g: Vec<f64> = group.iter().map(|&e| grads[e]).collect();
    let new = if simplex {
        gaea_step(&v, &g, lr)?
    } else {
        softmax_alpha_step(&v, &g, lr)?
    };
    for (&e, x) in group.iter().zip(new) {
        values[e] = x;
    }
    Ok(())
}
