//! Finite-difference cases for every tape op, the composite search-space ops and the
//! weighted loss, drawn from one seed.

use nas_core::autograd::{Tape, Var};
use nas_core::error::Result;
use nas_core::gradcheck::{check_gradients, GradCheck};
use nas_core::kernels::ConvGeom;
use nas_core::ops::OpKind;
use nas_core::supernet::mixed_op_forward;
use nas_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Distinct values at least `1e-3` apart and away from zero, so max/relu kinks stay far
/// outside the finite-difference step.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * 2.0 / n as f64).collect();
    v.shuffle(rng);
    let v = v.into_iter().map(|x| x + if x >= 0.0 { 0.05 } else { -0.05 }).collect();
    Tensor::new(shape, v).unwrap()
}

/// Reduces any output to a scalar with a fixed random projection.
fn project(rng: &mut ChaCha8Rng, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static, numel: usize) -> Build {
    let w: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Box::new(move |t, v| {
        let y = f(t, v)?;
        t.dot(y, w.clone())
    })
}

pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut push = |name: &str, inputs: Vec<Tensor<f64>>, build: Build| {
        out.push(Case {
            name: name.to_string(),
            inputs,
            build,
        })
    };
    let x4 = [2, 3, 5, 5];

    for (name, wshape, geom, out_n) in [
        ("conv2d 3x3", [4, 3, 3, 3], ConvGeom::same(3, 3, 1, 1, 1), 2 * 4 * 25),
        ("conv2d stride 2", [4, 3, 3, 3], ConvGeom::same(3, 3, 2, 1, 1), 2 * 4 * 9),
        ("conv2d dilation 2", [2, 3, 3, 3], ConvGeom::same(3, 3, 1, 2, 1), 2 * 2 * 25),
        ("conv2d depthwise", [3, 1, 3, 3], ConvGeom::same(3, 3, 1, 1, 3), 2 * 3 * 25),
        ("conv2d 1x1", [5, 3, 1, 1], ConvGeom::same(1, 1, 1, 1, 1), 2 * 5 * 25),
        ("conv2d 1x3", [2, 3, 1, 3], ConvGeom::same(1, 3, 1, 1, 1), 2 * 2 * 25),
    ] {
        let b = project(r, move |t, v| t.conv2d(v[0], v[1], geom), out_n);
        push(name, vec![uniform(r, &x4, 1.0), uniform(r, &wshape, 0.5)], b);
    }
    let b = project(r, |t, v| t.channel_bias(v[0], v[1]), 150);
    push("channel_bias", vec![uniform(r, &x4, 1.0), uniform(r, &[3], 1.0)], b);
    let b = project(r, |t, v| Ok(t.relu(v[0])), 150);
    push("relu", vec![spaced(r, &x4)], b);
    let b = project(r, |t, v| t.instance_norm(v[0], v[1], v[2]), 150);
    push(
        "instance_norm",
        vec![uniform(r, &x4, 1.0), uniform(r, &[3], 1.5), uniform(r, &[3], 1.0)],
        b,
    );
    for s in [1, 2] {
        let n = if s == 1 { 150 } else { 54 };
        let b = project(r, move |t, v| t.avg_pool3(v[0], s), n);
        push(&format!("avg_pool3 stride {s}"), vec![uniform(r, &x4, 1.0)], b);
        let b = project(r, move |t, v| t.max_pool3(v[0], s), n);
        push(&format!("max_pool3 stride {s}"), vec![spaced(r, &x4)], b);
    }
    let b = project(r, |t, v| t.subsample(v[0], 2), 54);
    push("subsample", vec![uniform(r, &x4, 1.0)], b);
    let b = project(r, |t, v| t.upsample_nearest(v[0], 2), 600);
    push("upsample_nearest", vec![uniform(r, &x4, 1.0)], b);
    let b = project(r, |t, v| t.upsample_bilinear(v[0], 2), 600);
    push("upsample_bilinear", vec![uniform(r, &x4, 1.0)], b);
    let b = project(r, |t, v| t.add(v[0], v[1]), 150);
    push("add", vec![uniform(r, &x4, 1.0), uniform(r, &x4, 1.0)], b);
    let b = project(r, |t, v| t.add_n(v), 150);
    push("add_n", vec![uniform(r, &x4, 1.0), uniform(r, &x4, 1.0), uniform(r, &x4, 1.0)], b);
    let b = project(r, |t, v| t.scale_by(v[0], v[1], 2), 150);
    push("scale_by", vec![uniform(r, &x4, 1.0), uniform(r, &[4], 1.0)], b);
    let b = project(r, |t, v| t.softmax(v[0]), 6);
    push("softmax", vec![uniform(r, &[6], 2.0)], b);
    let b = project(r, |t, v| t.concat(v), 2 * 5 * 25);
    push("concat", vec![uniform(r, &x4, 1.0), uniform(r, &[2, 2, 5, 5], 1.0)], b);
    let keep = [true, false, true];
    let b = project(r, move |t, v| t.mask_channels(v[0], &keep), 150);
    push("mask_channels", vec![uniform(r, &x4, 1.0)], b);
    push("sum", vec![uniform(r, &x4, 1.0)], Box::new(|t, v| Ok(t.sum(v[0]))));
    let b = project(r, |_, v| Ok(v[0]), 150);
    push("dot", vec![uniform(r, &x4, 1.0)], b);

    let target: Vec<u8> = (0..2 * 4 * 4).map(|_| r.gen_range(0..2u8)).collect();
    push(
        "weighted_cross_entropy",
        vec![uniform(r, &[2, 2, 4, 4], 2.0)],
        Box::new(move |t, v| t.weighted_cross_entropy(v[0], &target, &[1.0, 5.0])),
    );

    // composite ops of both spaces, with their parameters
    let c = 3;
    let mut ops: Vec<OpKind> = nas_core::space::SearchSpace::base().ops;
    ops.extend(nas_core::space::SearchSpace::large().ops);
    ops.dedup();
    for op in ops {
        if op.is_zero() {
            continue;
        }
        for stride in [1, 2] {
            let mut inputs = vec![spaced(r, &[2, c, 6, 6])];
            for (_, shape, _) in op.param_specs(c) {
                inputs.push(uniform(r, &shape, 0.7));
            }
            let side = 6 / stride;
            let b = project(r, move |t, v| op.apply(t, v[0], &v[1..], stride), 2 * c * side * side);
            push(&format!("{} stride {stride}", op.name()), inputs, b);
        }
    }

    // mixed op w.r.t. input, softmaxed weights and a conv op's parameters
    let ops = vec![OpKind::SepConv(3), OpKind::AvgPool, OpKind::MaxPool, OpKind::Skip, OpKind::Zero];
    let conv = 0;
    let specs: Vec<Vec<usize>> = ops[conv].param_specs(c).into_iter().map(|s| s.1).collect();
    let mut inputs = vec![spaced(r, &[1, c, 6, 6]), uniform(r, &[ops.len()], 1.0)];
    for s in &specs {
        inputs.push(uniform(r, s, 0.7));
    }
    let b = project(
        r,
        move |t, v| {
            let w = t.softmax(v[1])?;
            let params: Vec<Vec<Var>> = (0..ops.len()).map(|k| if k == conv { v[2..].to_vec() } else { Vec::new() }).collect();
            mixed_op_forward(t, v[0], w, &ops, &params, 1)
        },
        c * 36,
    );
    push("mixed_op", inputs, b);
    out
}

/// Worst relative error per case name over the given seeds.
pub fn run(seeds: std::ops::Range<u64>) -> Vec<(String, GradCheck)> {
    let mut worst: Vec<(String, GradCheck)> = Vec::new();
    for seed in seeds {
        for case in cases(seed) {
            let g = check_gradients(&case.inputs, EPS, &case.build).unwrap_or(GradCheck {
                max_rel_err: f64::INFINITY,
                worst_input: usize::MAX,
            });
            match worst.iter_mut().find(|w| w.0 == case.name) {
                Some(w) if g.max_rel_err > w.1.max_rel_err => w.1 = g,
                Some(_) => {}
                None => worst.push((case.name, g)),
            }
        }
    }
    worst
}
