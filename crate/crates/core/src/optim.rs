use alloc::vec::Vec;


use crate::error::{invalid, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

/// Momentum buffers and counters for the weight optimizer.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub momentum: Vec<Vec<T>>,
    pub step: usize,
    pub epoch: usize,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            momentum: params.iter().map(|p| alloc::vec![T::zero(); p.value.len()]).collect(),
            step: 0,
            epoch: 0,
        }
    }
}

/// One heavy-ball step on a single tensor:
/// `v = momentum * v + (grad + weight_decay * w)`, `w -= lr * v`.
pub fn sgd_momentum_update<T: Real>(
    w: &mut [T],
    v: &mut [T],
    grad: &[T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(invalid(alloc::format!("learning rate must be >= 0, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(invalid(alloc::format!("momentum must lie in [0, 1), got {momentum}")));
    }
    if w.len() != v.len() || w.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            context: "sgd_momentum_update".into(),
            expected: alloc::vec![w.len()],
            actual: alloc::vec![v.len(), grad.len()],
        });
    }
    let (lr, mom, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(grad) {
        *vi = mom * *vi + (gi + wd * *wi);
        *wi -= lr * *vi;
    }
    Ok(())
}

/// Applies [`sgd_momentum_update`] to every parameter that received a gradient.
pub fn sgd_momentum_step<T: Real>(
    params: &mut ParamStore<T>,
    state: &mut TrainState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.momentum.len() != params.len() {
        return Err(Error::ShapeMismatch {
            context: "sgd_momentum_step state".into(),
            expected: alloc::vec![params.len()],
            actual: alloc::vec![state.momentum.len()],
        });
    }
    for (p, v) in params.iter_mut().zip(state.momentum.iter_mut()) {
        let Some(g) = p.grad.as_ref() else { continue };
        sgd_momentum_update(p.value.data_mut(), v, g.data(), lr, momentum, weight_decay)?;
    }
    state.step += 1;
    Ok(())
}

/// Cosine annealing from `lr0` at step 0 down to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    let total = total_steps.max(1);
    let step = step.min(total);
    lr0 * (1.0 + libm::cos(core::f64::consts::PI * step as f64 / total as f64)) / 2.0
}
