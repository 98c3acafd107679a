mod support;

use nas_core::arch_optim::ArchOptimizer;
use nas_core::space::Topology;
use nas_core::supernet::ArchParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::gaea_cases::*;

#[test]
fn random_steps_stay_on_simplex() {
    let (sum_err, least) = random_steps(10_000, 0);
    assert!(sum_err < 1e-9, "{sum_err}");
    assert!(least >= 0.0);
}

#[test]
fn hand_step() {
    assert!(hand_example_err() < 1e-12);
}

#[test]
fn simplex_update_sharpens_faster_on_toy() {
    let (g, s) = toy_entropies(16, 200, 0.1, 0);
    assert!(g < s, "simplex {g} vs logit {s}");
}

#[test]
fn optimizer_keeps_every_group_on_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for name in Topology::PRESETS {
        let topo = Topology::preset(name, None, 8).unwrap();
        let mut arch = ArchParams::init(&topo, true, name != "resnext-unet");
        let opt = ArchOptimizer { lr: 0.5 };
        for _ in 0..50 {
            let mut g = arch.zero_grads();
            for c in [Some(&mut g.normal), g.reduce.as_mut()].into_iter().flatten() {
                c.alpha.iter_mut().flatten().for_each(|v| *v = rng.gen_range(-3.0..3.0));
                c.gamma.iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
            }
            g.beta.iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
            opt.step(&mut arch, &g).unwrap();
        }
        arch.validate(&topo).unwrap();
        for kind in arch.kinds() {
            for e in 0..topo.cell.edges.len() {
                let w = arch.op_weights(kind, e);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            for b in 0..topo.cell.num_blocks {
                let w = arch.gamma_weights(kind, b);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        for v in 0..topo.network.nodes.len() {
            let w = arch.beta_weights(v);
            if !w.is_empty() {
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
