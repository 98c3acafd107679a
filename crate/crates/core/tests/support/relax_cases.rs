//! Oracles for the continuous relaxation: term-by-term weighted sums, the K = 1 identity and
//! the exact expectation over every partial-channel mask.

use nas_core::autograd::{Tape, Var};
use nas_core::ops::OpKind;
use nas_core::space::SearchSpace;
use nas_core::supernet::{masked_mixed, mixed_op_forward, partial_channel_forward};
use nas_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

struct Inputs {
    x: Tensor<f64>,
    w: Vec<f64>,
    params: Vec<Vec<Tensor<f64>>>,
}

fn inputs(rng: &mut ChaCha8Rng, ops: &[OpKind], shape: [usize; 4]) -> Inputs {
    Inputs {
        x: random_tensor(rng, &shape),
        w: random_simplex(rng, ops.len()),
        params: ops
            .iter()
            .map(|op| op.param_specs(shape[1]).into_iter().map(|(_, s, _)| random_tensor(rng, &s)).collect())
            .collect(),
    }
}

fn bind(tape: &mut Tape<f64>, inp: &Inputs) -> (Var, Var, Vec<Vec<Var>>) {
    let x = tape.leaf(inp.x.clone(), true);
    let w = tape.leaf(Tensor::new(&[inp.w.len()], inp.w.clone()).unwrap(), true);
    let params = inp
        .params
        .iter()
        .map(|ps| ps.iter().map(|p| tape.leaf(p.clone(), true)).collect())
        .collect();
    (x, w, params)
}

/// Largest deviation of the mixed op from `sum_o w_o o(x)` evaluated op by op on separate
/// tapes, over both spaces and both strides.
pub fn eq4_max_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for space in [SearchSpace::base(), SearchSpace::large()] {
        for stride in [1, 2] {
            let inp = inputs(&mut rng, &space.ops, [2, 4, 8, 8]);
            let mut tape = Tape::new();
            let (x, w, params) = bind(&mut tape, &inp);
            let y = mixed_op_forward(&mut tape, x, w, &space.ops, &params, stride).unwrap();
            let got = tape.value(y).data().to_vec();
            let mut want = vec![0.0; got.len()];
            for (k, op) in space.ops.iter().enumerate() {
                let mut t = Tape::new();
                let xv = t.leaf(inp.x.clone(), false);
                let pv: Vec<Var> = inp.params[k].iter().map(|p| t.leaf(p.clone(), false)).collect();
                let o = op.apply(&mut t, xv, &pv, stride).unwrap();
                for (acc, v) in want.iter_mut().zip(t.value(o).data()) {
                    *acc += inp.w[k] * v;
                }
            }
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// `partial_channel_forward` with `K = 1` reproduces the mixed op bit for bit, in 32-bit.
pub fn k1_bitwise(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops = SearchSpace::base().ops;
    let inp = inputs(&mut rng, &ops, [2, 4, 8, 8]);
    let run = |pc: bool| -> Vec<f32> {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(inp.x.cast(), true);
        let w = tape.leaf(Tensor::new(&[inp.w.len()], inp.w.iter().map(|&v| v as f32).collect()).unwrap(), true);
        let params: Vec<Vec<Var>> = inp.params.iter().map(|ps| ps.iter().map(|p| tape.leaf(p.cast(), true)).collect()).collect();
        let y = if pc {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            partial_channel_forward(&mut tape, x, w, &ops, &params, 1, 1, &mut r).unwrap().0
        } else {
            mixed_op_forward(&mut tape, x, w, &ops, &params, 1).unwrap()
        };
        tape.value(y).data().to_vec()
    };
    let (a, b) = (run(true), run(false));
    a.len() == b.len() && a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits())
}

fn subsets(n: usize, m: usize) -> Vec<Vec<bool>> {
    (0u32..1 << n)
        .filter(|b| b.count_ones() as usize == m)
        .map(|b| (0..n).map(|i| b >> i & 1 == 1).collect())
        .collect()
}

/// Brute-force mean of the partial-channel output over every keep mask at `C = 4`, `K = 2`,
/// against `p mixed(x) + (1 - p) x` with `p = ceil(C/K) / C`. The ops act per channel and
/// linearly, so masking commutes with them and the expectation is exact.
pub fn mask_expectation_err(seed: u64) -> f64 {
    let (c, k) = (4usize, 2usize);
    let ops = [OpKind::Skip, OpKind::AvgPool, OpKind::Zero];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inp = inputs(&mut rng, &ops, [2, c, 6, 6]);
    let masks = subsets(c, c.div_ceil(k));
    let mut tape = Tape::new();
    let (x, w, params) = bind(&mut tape, &inp);
    let mut mean = vec![0.0; inp.x.len()];
    for keep in &masks {
        let y = masked_mixed(&mut tape, x, w, &ops, &params, 1, keep).unwrap();
        for (m, v) in mean.iter_mut().zip(tape.value(y).data()) {
            *m += v / masks.len() as f64;
        }
    }
    let full = mixed_op_forward(&mut tape, x, w, &ops, &params, 1).unwrap();
    let p = c.div_ceil(k) as f64 / c as f64;
    let analytic: Vec<f64> = tape
        .value(full)
        .data()
        .iter()
        .zip(inp.x.data())
        .map(|(m, xv)| p * m + (1.0 - p) * xv)
        .collect();
    mean.iter().zip(&analytic).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}
