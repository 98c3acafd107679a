//! Simplex updates: random steps, the hand-computed step and the two-op toy objective
//! `softmax(a) . c` compared against plain logit descent at equal step count and rate.

use nas_core::arch_optim::{entropy, gaea_step, softmax64, softmax_alpha_step};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(worst |sum - 1|, smallest entry)` over `steps` random updates of random rows.
pub fn random_steps(steps: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut least) = (0.0f64, f64::INFINITY);
    let mut th: Vec<f64> = Vec::new();
    for i in 0..steps {
        // restart from a fresh row now and then so the walk covers several sizes
        if i % 100 == 0 {
            let n = rng.gen_range(2..12);
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0) + 1e-6).collect();
            let s: f64 = raw.iter().sum();
            th = raw.into_iter().map(|v| v / s).collect();
        }
        let g: Vec<f64> = th.iter().map(|_| rng.gen_range(-50.0..50.0)).collect();
        th = gaea_step(&th, &g, rng.gen_range(0.001..2.0)).unwrap();
        worst = worst.max((th.iter().sum::<f64>() - 1.0).abs());
        least = th.iter().copied().fold(least, f64::min);
    }
    (worst, least)
}

/// Error of the step `theta = [0.5, 0.5]`, `grad = [1, 0]`, `eta = 0.1` against
/// `[e^-0.1, 1] / (1 + e^-0.1)`.
pub fn hand_example_err() -> f64 {
    let t = gaea_step(&[0.5, 0.5], &[1.0, 0.0], 0.1).unwrap();
    let e = (-0.1f64).exp();
    (t[0] - e / (1.0 + e)).abs().max((t[1] - 1.0 / (1.0 + e)).abs())
}

fn toy_logit_grad(a: &[f64], c: &[f64]) -> Vec<f64> {
    let p = softmax64(a);
    let pc: f64 = p.iter().zip(c).map(|(x, y)| x * y).sum();
    p.iter().zip(c).map(|(pi, ci)| pi * (ci - pc)).collect()
}

/// Mean final entropy `(simplex, logit)` over `edges` independent two-op edges, each with
/// a random cost vector, after `steps` updates at rate `lr`. The simplex update uses the
/// gradient of `theta . c` with respect to theta, which is `c`.
pub fn toy_entropies(edges: usize, steps: usize, lr: f64, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hg, mut hs) = (0.0, 0.0);
    for e in 0..edges {
        let c = if e == 0 { [1.0, 0.0] } else { [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)] };
        let mut th = vec![0.5, 0.5];
        let mut a = vec![0.0, 0.0];
        for _ in 0..steps {
            th = gaea_step(&th, &c, lr).unwrap();
            a = softmax_alpha_step(&a, &toy_logit_grad(&a, &c), lr).unwrap();
        }
        hg += entropy(&th);
        hs += entropy(&softmax64(&a));
    }
    (hg / edges as f64, hs / edges as f64)
}
