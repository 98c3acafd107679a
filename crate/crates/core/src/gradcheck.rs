//! Central finite-difference check of tape gradients in 64-bit.

use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Worst error over the checked inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` per input tensor, maximized.
    pub max_rel_err: f64,
    pub worst_input: usize,
}

/// Compares the tape gradient of the scalar built by `f` from `inputs` against central
/// differences with step `eps`. Inputs with an all-zero analytic and numeric gradient count
/// as exact.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    eps: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let y = f(&mut tape, &vars)?;
        Ok(tape.value(y).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = f(&mut tape, &vars)?;
    if tape.value(y).len() != 1 {
        return Err(invalid("gradient check needs a scalar output"));
    }
    let grads = tape.backward(y)?;
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst_input: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| alloc::vec![0.0; inputs[i].len()]);
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let num = (up - down) / (2.0 * eps);
            diff += (analytic[j] - num) * (analytic[j] - num);
            na += analytic[j] * analytic[j];
            nn += num * num;
        }
        let denom = num_traits::Float::sqrt(if na > nn { na } else { nn });
        let rel = if denom == 0.0 { 0.0 } else { num_traits::Float::sqrt(diff) / denom };
        if rel > out.max_rel_err || !rel.is_finite() {
            out = GradCheck {
                max_rel_err: if rel.is_finite() { rel } else { f64::INFINITY },
                worst_input: i,
            };
        }
    }
    Ok(out)
}
