//! Decoder oracles: exhaustive path enumeration, per-block input counts after top-K and the
//! documented path-selection arithmetic.

use nas_core::decode::{
    decode_cell, path_log_prob, select_paths, transition_log_probs, viterbi_best_path, CellDecode,
};
use nas_core::space::{CellKind, NetTopology, NetworkTemplate, Topology};
use nas_core::supernet::ArchParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PATH_LIMIT: usize = 200;

/// Network templates with at most [`PATH_LIMIT`] source-to-sink paths.
pub fn small_networks() -> Vec<(String, NetworkTemplate)> {
    let mut out = Vec::new();
    for (kind, depths) in [
        (NetTopology::Chain, 1..=5),
        (NetTopology::Unet, 1..=5),
        (NetTopology::Unetpp, 1..=5),
    ] {
        for d in depths {
            let Ok(net) = NetworkTemplate::build(kind, d, 4, None) else { continue };
            if net.enumerate_paths(PATH_LIMIT).is_ok() {
                out.push((format!("{kind:?}-{d}"), net));
            }
        }
    }
    out
}

/// Runs `draws` random beta draws on every small network and returns `(checks, worst gap)`
/// between the dynamic program and the best enumerated path, including the gap between the
/// reported score and the score of the reported path.
pub fn viterbi_vs_enumeration(draws: usize, seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut checks = 0;
    for (_, net) in small_networks() {
        let paths = net.enumerate_paths(PATH_LIMIT).unwrap();
        let topo = Topology {
            name: "probe".into(),
            cell: nas_core::space::CellTemplate::darts(2, 2).unwrap(),
            network: net.clone(),
            space: nas_core::space::SearchSpace::base(),
        };
        let mut arch = ArchParams::init(&topo, false, false);
        for _ in 0..draws {
            for b in &mut arch.beta {
                *b = rng.gen_range(-3.0..3.0);
            }
            let lp = transition_log_probs(&arch);
            let v = viterbi_best_path(&lp, &net).unwrap();
            let best = paths
                .iter()
                .map(|p| path_log_prob(p, &lp, &net))
                .fold(f64::NEG_INFINITY, f64::max);
            worst = worst.max((v.score - best).abs());
            worst = worst.max((path_log_prob(&v.path, &lp, &net) - v.score).abs());
            checks += 1;
        }
    }
    (checks, worst)
}

/// Largest number of inputs any block keeps after decoding random parameters of the
/// 4-block DARTS cell with top-K and edge-normalized decoding at `K = 2`.
pub fn topk_max_inputs(draws: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topo = Topology::preset("darts-unet", None, 8).unwrap();
    assert_eq!(topo.cell.num_blocks, 4);
    let mut most = 0;
    for i in 0..draws {
        let theta = i % 2 == 0;
        let mut arch = ArchParams::init(&topo, theta, theta);
        for kind in arch.kinds() {
            let cell = if kind == CellKind::Normal { &mut arch.normal } else { arch.reduce.as_mut().unwrap() };
            for row in &mut cell.alpha {
                for a in row.iter_mut() {
                    *a = rng.gen_range(if theta { 0.01..1.0 } else { -2.0..2.0 });
                }
                if theta {
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|a| *a /= s);
                }
            }
            for g in &mut cell.gamma {
                *g = rng.gen_range(0.01..1.0);
            }
        }
        if theta {
            for group in arch.gamma_groups.clone() {
                for cell in [Some(&mut arch.normal), arch.reduce.as_mut()].into_iter().flatten() {
                    let s: f64 = group.iter().map(|&e| cell.gamma[e]).sum();
                    group.iter().for_each(|&e| cell.gamma[e] /= s);
                }
            }
        }
        for mode in [CellDecode::Topk, CellDecode::Normalized] {
            for kind in arch.kinds() {
                let g = decode_cell(&topo, &arch, kind, mode, 2).unwrap();
                for b in 0..topo.cell.num_blocks {
                    let j = topo.cell.num_input_nodes + b;
                    let n = g.edges.iter().filter(|e| e.to == j).count();
                    assert!(n >= 1, "block {b} lost every input");
                    most = most.max(n);
                }
            }
        }
    }
    most
}

/// The two documented selection examples: equal scores keep every path with a zero
/// deviation; scores {0, 1} give mean 0.5, deviation 0.5, threshold 2 and fall back to the
/// better path.
pub fn hand_selection_ok() -> bool {
    let (kept, mean, std, thr, fb) = select_paths(&[0.0, 1.0]);
    let two = mean == 0.5 && std == 0.5 && thr == 2.0 && fb && kept == [1];
    let (kept, mean, std, _, fb) = select_paths(&[-0.7; 6]);
    let equal = std == 0.0 && (mean + 0.7).abs() < 1e-15 && !fb && kept.len() == 6;
    two && equal
}
