//! Evolutionary search over genotypes with an orchestrator/worker message contract.
//!
//! The orchestrator is the only writer of the population and the history. Jobs go out as
//! [`JobMessage`]s through a [`Dispatcher`], which must answer each with exactly one
//! [`ResultMessage`]; results are processed in id order, so the outcome depends only on the
//! seed and never on how many workers ran the jobs. A failed job is re-sent once.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::error::{invalid, Result};
use crate::genotype::{CellGenotype, GeneEdge, Genotype, NetworkGenotype};
use crate::memory::estimate_memory;
use crate::ops::OpKind;
use crate::space::{CellTemplate, SearchSpace, Topology};
use crate::supernet::{NetConfig, Network};
use crate::train::{retrain, TrainConfig};

/// Each op drawn uniformly and independently. With `max_inputs`, every block keeps that many
/// of its template input edges, chosen uniformly.
pub fn sample_random_cell<R: Rng>(
    template: &CellTemplate,
    space: &SearchSpace,
    max_inputs: Option<usize>,
    rng: &mut R,
) -> CellGenotype {
    let mut edges = Vec::new();
    for b in 0..template.num_blocks {
        let j = template.num_input_nodes + b;
        let mut inc = template.incoming(j);
        if let Some(m) = max_inputs {
            inc.shuffle(rng);
            inc.truncate(m.max(1));
            inc.sort_unstable();
        }
        for e in inc {
            let (from, to) = template.edges[e];
            let op = space.ops[rng.gen_range(0..space.len())];
            edges.push(GeneEdge { from, to, op });
        }
    }
    CellGenotype::new(edges)
}

/// Random cells for every cell kind of the topology over the full network.
pub fn sample_random_genotype<R: Rng>(topo: &Topology, max_inputs: Option<usize>, rng: &mut R) -> Genotype {
    let normal = sample_random_cell(&topo.cell, &topo.space, max_inputs, rng);
    let reduce = topo
        .has_reduction()
        .then(|| sample_random_cell(&topo.cell, &topo.space, max_inputs, rng));
    Genotype {
        topology: topo.name.clone(),
        normal,
        reduce,
        network: NetworkGenotype::full(&topo.network),
    }
}

/// Per edge, with probability `rate`, switches to a uniformly chosen different op; when
/// `rate > 0`, each cell additionally rewires one edge to an unused template source of the
/// same block with probability `topology_move_prob`.
pub fn mutate<R: Rng>(genotype: &Genotype, topo: &Topology, rng: &mut R, rate: f64, topology_move_prob: f64) -> Genotype {
    let mut out = genotype.clone();
    if !(rate > 0.0) {
        return out;
    }
    let ops = &topo.space.ops;
    for kind in genotype.kinds() {
        let cell = out.cell_mut(kind);
        for e in &mut cell.edges {
            if ops.len() > 1 && rng.gen_bool(rate.min(1.0)) {
                let others: Vec<OpKind> = ops.iter().copied().filter(|&o| o != e.op).collect();
                e.op = others[rng.gen_range(0..others.len())];
            }
        }
        if rng.gen_bool(topology_move_prob.clamp(0.0, 1.0)) && !cell.edges.is_empty() {
            let i = rng.gen_range(0..cell.edges.len());
            let to = cell.edges[i].to;
            let used: Vec<usize> = cell.edges.iter().filter(|e| e.to == to).map(|e| e.from).collect();
            let free: Vec<usize> = topo
                .cell
                .incoming(to)
                .into_iter()
                .map(|t| topo.cell.edges[t].0)
                .filter(|f| !used.contains(f))
                .collect();
            if !free.is_empty() {
                cell.edges[i].from = free[rng.gen_range(0..free.len())];
                *cell = CellGenotype::new(core::mem::take(&mut cell.edges));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    #[serde(rename = "ok")]
    Ok,
    #[serde(rename = "failed")]
    Failed,
    #[serde(rename = "rejected-memory")]
    RejectedMemory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobMessage {
    pub id: u64,
    pub attempt: u32,
    pub genotype: Genotype,
    pub budget_epochs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultMessage {
    pub id: u64,
    pub attempt: u32,
    pub fitness: Option<f64>,
    pub status: Status,
    pub error: Option<String>,
    pub worker: usize,
    pub wall_time: f64,
}

/// Trains and scores one job. Must be a pure function of the job.
pub trait Evaluator: Sync {
    fn evaluate(&self, job: &JobMessage) -> core::result::Result<f64, String>;
}

/// Runs a batch of jobs and returns exactly one result per job, in any order.
pub trait Dispatcher {
    fn dispatch(&mut self, jobs: &[JobMessage], evaluator: &dyn Evaluator) -> Vec<ResultMessage>;
}

/// Runs every job on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct InlineDispatcher;

impl Dispatcher for InlineDispatcher {
    fn dispatch(&mut self, jobs: &[JobMessage], evaluator: &dyn Evaluator) -> Vec<ResultMessage> {
        jobs.iter().map(|j| run_job(j, evaluator, 0, 0.0)).collect()
    }
}

/// Evaluates a job and wraps the outcome; fitness outside `[0, 1]` counts as a failure.
pub fn run_job(job: &JobMessage, evaluator: &dyn Evaluator, worker: usize, wall_time: f64) -> ResultMessage {
    let (fitness, status, error) = match evaluator.evaluate(job) {
        Ok(f) if (0.0..=1.0).contains(&f) => (Some(f), Status::Ok, None),
        Ok(f) => (None, Status::Failed, Some(format!("fitness {f} outside [0, 1]"))),
        Err(e) => (None, Status::Failed, Some(e)),
    };
    ResultMessage {
        id: job.id,
        attempt: job.attempt,
        fitness,
        status,
        error,
        worker,
        wall_time,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub generation: usize,
    pub id: u64,
    pub genotype: Genotype,
    pub fitness: Option<f64>,
    pub status: Status,
    pub attempts: u32,
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<HistoryRecord>,
}

impl History {
    pub fn push(&mut self, r: HistoryRecord) -> Result<()> {
        if self.records.iter().any(|x| x.id == r.id) {
            return Err(invalid(format!("individual {} recorded twice", r.id)));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn best(&self) -> Option<&HistoryRecord> {
        self.records
            .iter()
            .filter(|r| r.fitness.is_some())
            .max_by(|a, b| a.fitness.unwrap().total_cmp(&b.fitness.unwrap()).then(b.id.cmp(&a.id)))
    }

    /// Records sorted by id with wall times zeroed, for comparing runs.
    pub fn normalized(&self) -> Vec<HistoryRecord> {
        let mut v: Vec<HistoryRecord> = self
            .records
            .iter()
            .cloned()
            .map(|mut r| {
                r.wall_time = 0.0;
                r
            })
            .collect();
        v.sort_by_key(|r| r.id);
        v
    }
}

/// Every message sent and received, for auditing the one-result-per-job contract.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MessageTrace {
    pub sent: Vec<(u64, u32)>,
    pub received: Vec<(u64, u32, Status)>,
}

impl MessageTrace {
    pub fn audit(&self) -> Result<()> {
        let mut counts: BTreeMap<(u64, u32), i64> = BTreeMap::new();
        for &k in &self.sent {
            *counts.entry(k).or_default() += 1;
        }
        for &(id, a, _) in &self.received {
            *counts.entry((id, a)).or_default() -= 1;
        }
        for (k, c) in counts {
            if c != 0 || self.sent.iter().filter(|&&s| s == k).count() != 1 {
                return Err(invalid(format!("job {k:?} does not have exactly one result")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: u64,
    pub genotype: Genotype,
    pub fitness: Option<f64>,
    /// Generation the individual (or the clone it descends from) entered the population.
    pub born: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub generation: usize,
    pub population: Vec<u64>,
    pub best_fitness: Option<f64>,
    pub aged_out: Vec<u64>,
    /// Id of an elite re-inserted under a new id after aging removed it.
    pub rescued: Option<(u64, u64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvoConfig {
    pub pop_size: usize,
    pub generations: usize,
    pub workers: usize,
    pub mutation_rate: f64,
    pub topology_move_prob: f64,
    pub aging_fraction: f64,
    pub elitism: bool,
    pub tournament: usize,
    /// Inputs kept per block in randomly sampled cells; `None` keeps every template edge.
    pub max_inputs: Option<usize>,
    pub budget_epochs: usize,
    pub seed: u64,
}

impl Default for EvoConfig {
    fn default() -> Self {
        Self {
            pop_size: 8,
            generations: 4,
            workers: 2,
            mutation_rate: 0.2,
            topology_move_prob: 0.3,
            aging_fraction: 0.25,
            elitism: true,
            tournament: 3,
            max_inputs: Some(2),
            budget_epochs: 10,
            seed: 0,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pop_size < 2 || self.workers == 0 || self.generations == 0 || self.tournament == 0 {
            return Err(invalid("need pop_size >= 2, workers >= 1, generations >= 1, tournament >= 1"));
        }
        for (name, v) in [
            ("mutation_rate", self.mutation_rate),
            ("topology_move_prob", self.topology_move_prob),
            ("aging_fraction", self.aging_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Rejects genotypes whose estimated training footprint exceeds `budget` bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryGuard {
    pub budget: usize,
    pub input_shape: [usize; 3],
    pub batch: usize,
    pub num_classes: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvoOutcome {
    pub history: History,
    pub summaries: Vec<GenerationSummary>,
    pub trace: MessageTrace,
    pub population: Vec<Individual>,
    /// False when the generation callback stopped the run early.
    pub completed: bool,
}

/// Seed of the training job for individual `id`.
pub fn job_seed(run_seed: u64, id: u64) -> u64 {
    run_seed ^ (id.wrapping_add(1)).wrapping_mul(0xA076_1D64_78BD_642F)
}

struct Orchestrator<'a> {
    cfg: &'a EvoConfig,
    topo: &'a Topology,
    guard: Option<&'a MemoryGuard>,
    dispatcher: &'a mut dyn Dispatcher,
    evaluator: &'a dyn Evaluator,
    cache: BTreeMap<u64, HistoryRecord>,
    history: History,
    trace: MessageTrace,
}

impl Orchestrator<'_> {
    /// Evaluates newly created individuals of one generation and records them.
    fn evaluate(&mut self, generation: usize, inds: &mut [Individual]) -> Result<()> {
        let mut records: BTreeMap<u64, HistoryRecord> = BTreeMap::new();
        let mut pending = Vec::new();
        for ind in inds.iter() {
            if let Some(r) = self.cache.get(&ind.id) {
                if r.genotype != ind.genotype || r.generation != generation {
                    return Err(invalid(format!("resumed history disagrees with replay at individual {}", ind.id)));
                }
                records.insert(ind.id, r.clone());
                continue;
            }
            if let Some(g) = self.guard {
                let est = estimate_memory(self.topo, &ind.genotype, g.input_shape, g.batch, g.num_classes, g.bytes)?;
                if est.total() > g.budget {
                    records.insert(
                        ind.id,
                        HistoryRecord {
                            generation,
                            id: ind.id,
                            genotype: ind.genotype.clone(),
                            fitness: None,
                            status: Status::RejectedMemory,
                            attempts: 0,
                            wall_time: 0.0,
                        },
                    );
                    continue;
                }
            }
            pending.push(JobMessage {
                id: ind.id,
                attempt: 0,
                genotype: ind.genotype.clone(),
                budget_epochs: self.cfg.budget_epochs,
                seed: job_seed(self.cfg.seed, ind.id),
            });
        }
        for attempt in 0..2u32 {
            if pending.is_empty() {
                break;
            }
            for j in &mut pending {
                j.attempt = attempt;
                self.trace.sent.push((j.id, attempt));
            }
            let mut results = self.dispatcher.dispatch(&pending, self.evaluator);
            results.sort_by_key(|r| r.id);
            let mut retry = Vec::new();
            for r in results {
                self.trace.received.push((r.id, r.attempt, r.status));
                let Some(job) = pending.iter().find(|j| j.id == r.id) else {
                    return Err(invalid(format!("result for unknown job {}", r.id)));
                };
                if r.status == Status::Failed && attempt == 0 {
                    retry.push(job.clone());
                    continue;
                }
                records.insert(
                    r.id,
                    HistoryRecord {
                        generation,
                        id: r.id,
                        genotype: job.genotype.clone(),
                        fitness: r.fitness,
                        status: r.status,
                        attempts: attempt + 1,
                        wall_time: r.wall_time,
                    },
                );
            }
            pending = retry;
        }
        for ind in inds.iter_mut() {
            let r = records
                .remove(&ind.id)
                .ok_or_else(|| invalid(format!("no result for individual {}", ind.id)))?;
            ind.fitness = r.fitness;
            self.history.push(r)?;
        }
        Ok(())
    }
}

fn fitness_key(f: Option<f64>) -> f64 {
    f.unwrap_or(f64::NEG_INFINITY)
}

fn tournament<'p, R: Rng>(pop: &'p [Individual], size: usize, rng: &mut R) -> &'p Individual {
    let mut best: Option<&Individual> = None;
    for _ in 0..size {
        let c = &pop[rng.gen_range(0..pop.len())];
        best = match best {
            Some(b) if fitness_key(b.fitness) > fitness_key(c.fitness)
                || (fitness_key(b.fitness) == fitness_key(c.fitness) && b.id <= c.id) =>
            {
                Some(b)
            }
            _ => Some(c),
        };
    }
    best.unwrap()
}

/// Runs the evolutionary loop. `resume` holds records of an earlier run with the same
/// configuration; generations it covers completely are replayed from it instead of being
/// re-evaluated. `on_generation` sees each finished generation and its new records and may
/// stop the run.
pub fn run_evolution(
    cfg: &EvoConfig,
    topo: &Topology,
    guard: Option<&MemoryGuard>,
    dispatcher: &mut dyn Dispatcher,
    evaluator: &dyn Evaluator,
    resume: &[HistoryRecord],
    on_generation: &mut dyn FnMut(&GenerationSummary, &[HistoryRecord]) -> ControlFlow<()>,
) -> Result<EvoOutcome> {
    cfg.validate()?;
    topo.validate()?;
    let mut per_gen: BTreeMap<usize, usize> = BTreeMap::new();
    for r in resume {
        *per_gen.entry(r.generation).or_default() += 1;
    }
    let cache = resume
        .iter()
        .filter(|r| per_gen[&r.generation] == cfg.pop_size)
        .map(|r| (r.id, r.clone()))
        .collect();
    let mut orch = Orchestrator {
        cfg,
        topo,
        guard,
        dispatcher,
        evaluator,
        cache,
        history: History::default(),
        trace: MessageTrace::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut next_id = 0u64;
    let mut summaries = Vec::new();

    let mut population: Vec<Individual> = (0..cfg.pop_size)
        .map(|_| {
            let g = sample_random_genotype(topo, cfg.max_inputs, &mut rng);
            next_id += 1;
            Individual {
                id: next_id - 1,
                genotype: g,
                fitness: None,
                born: 0,
            }
        })
        .collect();
    orch.evaluate(0, &mut population)?;
    let summary = GenerationSummary {
        generation: 0,
        population: population.iter().map(|i| i.id).collect(),
        best_fitness: best_of(&population),
        aged_out: Vec::new(),
        rescued: None,
    };
    let stop = on_generation(&summary, &orch.history.records);
    summaries.push(summary);
    if stop.is_break() {
        return Ok(finish(orch, summaries, population, false));
    }

    for generation in 1..cfg.generations {
        let mut children: Vec<Individual> = (0..cfg.pop_size)
            .map(|_| {
                let parent = tournament(&population, cfg.tournament, &mut rng);
                let g = mutate(&parent.genotype, topo, &mut rng, cfg.mutation_rate, cfg.topology_move_prob);
                next_id += 1;
                Individual {
                    id: next_id - 1,
                    genotype: g,
                    fitness: None,
                    born: generation,
                }
            })
            .collect();
        let before = orch.history.len();
        orch.evaluate(generation, &mut children)?;

        let prev_best = population
            .iter()
            .filter(|i| i.fitness.is_some())
            .max_by(|a, b| fitness_key(a.fitness).total_cmp(&fitness_key(b.fitness)).then(b.id.cmp(&a.id)))
            .cloned();
        // the oldest fraction leaves regardless of fitness
        let n_age = num_traits::Float::floor(cfg.aging_fraction * population.len() as f64) as usize;
        let mut by_age = population.clone();
        by_age.sort_by_key(|i| (i.born, i.id));
        let aged_out: Vec<u64> = by_age.iter().take(n_age).map(|i| i.id).collect();
        let mut pool: Vec<Individual> = by_age.into_iter().skip(n_age).chain(children).collect();
        pool.sort_by(|a, b| {
            fitness_key(b.fitness)
                .total_cmp(&fitness_key(a.fitness))
                .then(b.born.cmp(&a.born))
                .then(a.id.cmp(&b.id))
        });
        pool.truncate(cfg.pop_size);
        let mut rescued = None;
        if cfg.elitism {
            if let Some(elite) = prev_best {
                if fitness_key(elite.fitness) > fitness_key(best_of(&pool)) {
                    let clone = Individual {
                        id: next_id,
                        born: generation,
                        ..elite.clone()
                    };
                    next_id += 1;
                    rescued = Some((elite.id, clone.id));
                    pool.pop();
                    pool.push(clone);
                }
            }
        }
        population = pool;
        let summary = GenerationSummary {
            generation,
            population: population.iter().map(|i| i.id).collect(),
            best_fitness: best_of(&population),
            aged_out,
            rescued,
        };
        let stop = on_generation(&summary, &orch.history.records[before..]);
        summaries.push(summary);
        if stop.is_break() && generation + 1 < cfg.generations {
            return Ok(finish(orch, summaries, population, false));
        }
    }
    Ok(finish(orch, summaries, population, true))
}

fn best_of(pop: &[Individual]) -> Option<f64> {
    pop.iter().filter_map(|i| i.fitness).fold(None, |m, f| Some(m.map_or(f, |m: f64| m.max(f))))
}

fn finish(orch: Orchestrator<'_>, summaries: Vec<GenerationSummary>, population: Vec<Individual>, completed: bool) -> EvoOutcome {
    EvoOutcome {
        history: orch.history,
        summaries,
        trace: orch.trace,
        population,
        completed,
    }
}

/// Fitness = validation MeanIoU of the genotype's network after `budget_epochs` of training
/// in 32-bit.
pub struct TrainingEvaluator<'a> {
    pub topology: &'a Topology,
    pub net: NetConfig,
    pub train: &'a DatasetSplit,
    pub valid: &'a DatasetSplit,
    pub train_cfg: TrainConfig,
}

impl Evaluator for TrainingEvaluator<'_> {
    fn evaluate(&self, job: &JobMessage) -> core::result::Result<f64, String> {
        let run = || -> Result<f64> {
            let mut net = Network::<f32>::discrete(self.topology.clone(), &job.genotype, self.net.clone(), job.seed)?;
            // the validation score is the fitness, so no checkpoint selection: keep the
            // weights of the last epoch
            let epochs = job.budget_epochs.max(1);
            let cfg = TrainConfig {
                epochs,
                seed: job.seed,
                select_from_epoch: epochs,
                ..self.train_cfg.clone()
            };
            let out = retrain(&mut net, self.train, self.valid, self.valid, &cfg)?;
            Ok(out.best_valid_miou)
        };
        run().map_err(|e| format!("{e}"))
    }
}
