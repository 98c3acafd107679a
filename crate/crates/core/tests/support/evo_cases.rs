//! Orchestrator checks with a synthetic evaluator, so they run in milliseconds and can be
//! driven by any dispatcher.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::ControlFlow;

use nas_core::evo::*;
use nas_core::genotype::Genotype;
use nas_core::space::Topology;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fitness from the op mix of the genotype plus seed noise. Every fifth job fails its first
/// attempt and every eleventh fails both, to exercise the retry path.
pub struct Synthetic;

impl Evaluator for Synthetic {
    fn evaluate(&self, job: &JobMessage) -> Result<f64, String> {
        if job.id % 11 == 10 || (job.id % 5 == 4 && job.attempt == 0) {
            return Err(format!("synthetic failure of job {}", job.id));
        }
        let g = &job.genotype;
        let edges: Vec<_> = g.kinds().into_iter().flat_map(|k| g.cell(k).edges.clone()).collect();
        let live = edges.iter().filter(|e| !e.op.is_parameter_free()).count() as f64;
        let noise = (job.seed % 1000) as f64 / 1000.0;
        Ok((0.8 * live / edges.len().max(1) as f64 + 0.2 * noise).clamp(0.0, 1.0))
    }
}

/// Dispatcher on plain std threads that hands out jobs round-robin and returns the results
/// in reverse arrival order, so callers cannot rely on ordering.
pub struct ShuffledThreads(pub usize);

impl Dispatcher for ShuffledThreads {
    fn dispatch(&mut self, jobs: &[JobMessage], evaluator: &dyn Evaluator) -> Vec<ResultMessage> {
        let workers = self.0.max(1);
        let mut out: Vec<ResultMessage> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    s.spawn(move || {
                        jobs.iter()
                            .skip(w)
                            .step_by(workers)
                            .map(|j| run_job(j, evaluator, w, 0.0))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
        });
        out.reverse();
        out
    }
}

pub fn topology() -> Topology {
    Topology::preset("darts-unet", None, 8).unwrap()
}

pub fn run(cfg: &EvoConfig, dispatcher: &mut dyn Dispatcher) -> EvoOutcome {
    run_evolution(cfg, &topology(), None, dispatcher, &Synthetic, &[], &mut |_, _| ControlFlow::Continue(())).unwrap()
}

/// Normalized histories of the same run driven by 1 and by `workers` workers.
pub fn worker_invariance(cfg: &EvoConfig, mut make: impl FnMut(usize) -> Box<dyn Dispatcher>, workers: usize) -> bool {
    let a = run(cfg, make(1).as_mut());
    let b = run(cfg, make(workers).as_mut());
    a.history.normalized() == b.history.normalized() && a.summaries == b.summaries
}

pub fn random_config(rng: &mut ChaCha8Rng) -> EvoConfig {
    EvoConfig {
        pop_size: rng.gen_range(2..10),
        generations: rng.gen_range(2..6),
        workers: rng.gen_range(1..4),
        mutation_rate: rng.gen_range(0.0..1.0),
        topology_move_prob: rng.gen_range(0.0..1.0),
        aging_fraction: rng.gen_range(0.0..0.9),
        elitism: true,
        tournament: rng.gen_range(1..5),
        max_inputs: if rng.gen_bool(0.5) { Some(2) } else { None },
        budget_epochs: 1,
        seed: rng.gen(),
    }
}

/// Checks the per-generation invariants of an outcome and returns the first violation.
pub fn check_invariants(cfg: &EvoConfig, out: &EvoOutcome) -> Result<(), String> {
    out.trace.audit().map_err(|e| e.to_string())?;
    if out.history.len() != cfg.pop_size * cfg.generations {
        return Err(format!("{} records for {} x {}", out.history.len(), cfg.pop_size, cfg.generations));
    }
    let mut born: BTreeMap<u64, usize> = out.history.records.iter().map(|r| (r.id, r.generation)).collect();
    let mut prev: Option<&nas_core::evo::GenerationSummary> = None;
    for s in &out.summaries {
        if s.population.len() != cfg.pop_size {
            return Err(format!("generation {} has {} members", s.generation, s.population.len()));
        }
        if let Some((_, new)) = s.rescued {
            born.insert(new, s.generation);
        }
        if let Some(p) = prev {
            if cfg.elitism && s.best_fitness < p.best_fitness {
                return Err(format!("best fitness fell in generation {}", s.generation));
            }
            let n_age = (cfg.aging_fraction * cfg.pop_size as f64).floor() as usize;
            if s.aged_out.len() != n_age {
                return Err(format!("{} aged out, expected {n_age}", s.aged_out.len()));
            }
            let now: BTreeSet<u64> = s.population.iter().copied().collect();
            if s.aged_out.iter().any(|id| now.contains(id)) {
                return Err(format!("aged-out member survived generation {}", s.generation));
            }
            // the aged-out are the oldest of the previous population
            let key = |id: &u64| (born[id], *id);
            let oldest_kept = p.population.iter().filter(|id| !s.aged_out.contains(id)).map(key).min();
            let youngest_out = s.aged_out.iter().map(key).max();
            if let (Some(k), Some(o)) = (oldest_kept, youngest_out) {
                if o > k {
                    return Err(format!("generation {} aged out {o:?} but kept older {k:?}", s.generation));
                }
            }
        }
        prev = Some(s);
    }
    Ok(())
}

/// One genotype mutated `n` times from fresh random parents; returns how many failed
/// validation and the relative frequency of every op among switched edges.
pub fn mutation_stats(n: usize, seed: u64) -> (usize, Vec<f64>) {
    let topo = topology();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut invalid = 0;
    let mut counts = vec![0usize; topo.space.len()];
    for _ in 0..n {
        let g: Genotype = sample_random_genotype(&topo, Some(2), &mut rng);
        let m = mutate(&g, &topo, &mut rng, 0.5, 0.5);
        if m.validate(&topo).is_err() {
            invalid += 1;
        }
        for e in &m.normal.edges {
            counts[topo.space.index_of(e.op).unwrap()] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    (invalid, counts.into_iter().map(|c| c as f64 / total as f64).collect())
}
