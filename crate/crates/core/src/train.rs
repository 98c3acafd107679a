//! Search and retrain loops over synthetic splits.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch_optim::{arch_update_gate, ArchOptimizer, EntropyTrace};
use crate::autograd::Tape;
use crate::data::DatasetSplit;
use crate::error::{invalid, Error, Result};
use crate::metrics::{mean_iou, pr_curve, predict, EvalReport, DEFAULT_THRESHOLDS};
use crate::optim::{cosine_lr, sgd_momentum_step, TrainState};
use crate::supernet::{ArchParams, Mode, Network};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `[background, object]`.
    pub class_weights: [f64; 2],
    /// Architecture updates start at this epoch (search only).
    pub alpha_start_epoch: usize,
    /// Learning rate of the architecture optimizer (search only).
    pub arch_lr: f64,
    /// Best-checkpoint selection ignores earlier epochs (retrain only).
    pub select_from_epoch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 4,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
            class_weights: [1.0, 5.0],
            alpha_start_epoch: 15,
            arch_lr: 0.1,
            select_from_epoch: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(invalid("epochs and batch must be positive"));
        }
        if !(self.lr0 >= 0.0) || !(self.arch_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid("learning rates and weight decay must be non-negative (arch lr positive)"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if self.class_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(invalid("class weights must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_miou: f64,
    pub mean_entropy: Option<f64>,
    pub arch_updated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub arch: ArchParams,
    pub trace: EntropyTrace,
    pub logs: Vec<EpochLog>,
}

#[derive(Clone, Debug)]
pub struct RetrainOutcome<T> {
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_miou: f64,
    pub best_weights: Vec<(String, Tensor<T>)>,
    pub test: EvalReport,
    /// Test-split argmax predictions in `(N, H, W)` order.
    pub test_predictions: Vec<u8>,
}

fn batches(n: usize, batch: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

/// One epoch of SGD on the network weights; arch gradients go to `arch_opt` when given.
fn train_epoch<T: Real>(
    net: &mut Network<T>,
    state: &mut TrainState<T>,
    data: &DatasetSplit,
    cfg: &TrainConfig,
    total_steps: usize,
    arch_opt: Option<&ArchOptimizer>,
) -> Result<f64> {
    let weights = [T::of(cfg.class_weights[0]), T::of(cfg.class_weights[1])];
    let epoch_seed = cfg.seed ^ (state.epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut loss_sum = 0.0;
    let plan = batches(data.len(), cfg.batch, epoch_seed);
    for idx in &plan {
        let (x, y) = data.batch::<T>(idx)?;
        let mut tape = Tape::new();
        let mode = if net.is_search() { Mode::Search } else { Mode::Eval };
        let fw = net.forward(&mut tape, &x, mode)?;
        let loss = tape.weighted_cross_entropy(fw.logits, &y, &weights)?;
        let lv = tape.value(loss).data()[0].f64();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", state.step)));
        }
        loss_sum += lv;
        let mut grads = tape.backward(loss)?;
        let arch_grads = net.arch_grads(&fw, &grads);
        net.params_mut().zero_grads();
        net.accumulate_grads(&fw, &mut grads);
        let lr = cosine_lr(state.step, total_steps, cfg.lr0);
        sgd_momentum_step(net.params_mut(), state, lr, cfg.momentum, cfg.weight_decay)?;
        if let (Some(opt), Some(g)) = (arch_opt, arch_grads) {
            let arch = net.arch_mut().ok_or_else(|| invalid("arch optimizer on a discrete network"))?;
            opt.step(arch, &g)?;
        }
    }
    if !net.params().all_finite() {
        return Err(Error::NonFinite(format!("network weights after epoch {}", state.epoch)));
    }
    Ok(loss_sum / plan.len().max(1) as f64)
}

/// Argmax predictions over a split in eval mode.
pub fn predict_split<T: Real>(net: &mut Network<T>, data: &DatasetSplit, batch: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(data.len() * data.height * data.width);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = data.batch::<T>(chunk)?;
        let mut tape = Tape::new();
        let fw = net.forward(&mut tape, &x, Mode::Eval)?;
        out.extend(predict(tape.value(fw.logits))?);
    }
    Ok(out)
}

pub fn evaluate<T: Real>(net: &mut Network<T>, data: &DatasetSplit, batch: usize) -> Result<EvalReport> {
    let pred = predict_split(net, data, batch)?;
    pr_curve(&pred, &data.masks(), data.height, data.width, &DEFAULT_THRESHOLDS)
}

/// Trains weights and architecture of a search network on the training split; arch updates
/// start at `alpha_start_epoch`.
pub fn search<T: Real>(
    net: &mut Network<T>,
    train: &DatasetSplit,
    valid: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if !net.is_search() {
        return Err(invalid("search needs a network with architecture parameters"));
    }
    if train.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let mut state = TrainState::new(net.params());
    let total = cfg.epochs * train.len().div_ceil(cfg.batch);
    let opt = ArchOptimizer { lr: cfg.arch_lr };
    let mut trace = EntropyTrace::default();
    let mut logs = Vec::new();
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let gate = arch_update_gate(epoch, cfg.alpha_start_epoch);
        let loss = train_epoch(net, &mut state, train, cfg, total, gate.then_some(&opt))?;
        let pred = predict_split(net, valid, cfg.batch)?;
        let arch = net.arch().ok_or_else(|| invalid("search network lost its architecture"))?;
        trace.record(epoch, arch);
        logs.push(EpochLog {
            epoch,
            train_loss: loss,
            valid_miou: mean_iou(&pred, &valid.masks()),
            mean_entropy: trace.rows.last().map(|r| r.mean),
            arch_updated: gate,
        });
    }
    Ok(SearchOutcome {
        arch: net.arch().cloned().ok_or_else(|| invalid("search network lost its architecture"))?,
        trace,
        logs,
    })
}

/// Trains a discrete network, keeps the weights with the best validation MeanIoU from
/// `select_from_epoch` on (the last epoch if the floor lies beyond the budget) and evaluates
/// them on the test split.
pub fn retrain<T: Real>(
    net: &mut Network<T>,
    train: &DatasetSplit,
    valid: &DatasetSplit,
    test: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<RetrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let mut state = TrainState::new(net.params());
    let total = cfg.epochs * train.len().div_ceil(cfg.batch);
    let floor = cfg.select_from_epoch.min(cfg.epochs - 1);
    let mut logs = Vec::new();
    let mut best: Option<(usize, f64, Vec<(String, Tensor<T>)>)> = None;
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let loss = train_epoch(net, &mut state, train, cfg, total, None)?;
        let pred = predict_split(net, valid, cfg.batch)?;
        let miou = mean_iou(&pred, &valid.masks());
        logs.push(EpochLog {
            epoch,
            train_loss: loss,
            valid_miou: miou,
            mean_entropy: None,
            arch_updated: false,
        });
        if epoch >= floor && best.as_ref().is_none_or(|b| miou > b.1) {
            best = Some((epoch, miou, net.params().snapshot()));
        }
    }
    let (best_epoch, best_valid_miou, best_weights) = best.ok_or_else(|| invalid("no epoch was eligible for selection"))?;
    net.params_mut().load(&best_weights)?;
    let test_predictions = predict_split(net, test, cfg.batch)?;
    let report = pr_curve(&test_predictions, &test.masks(), test.height, test.width, &DEFAULT_THRESHOLDS)?;
    Ok(RetrainOutcome {
        logs,
        best_epoch,
        best_valid_miou,
        best_weights,
        test: report,
        test_predictions,
    })
}

/// MeanIoU of predicting background everywhere.
pub fn all_background_miou(data: &DatasetSplit) -> f64 {
    let gt = data.masks();
    mean_iou(&alloc::vec![0u8; gt.len()], &gt)
}
