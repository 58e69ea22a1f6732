//! Soft-mask sparsification and the iterative lottery-ticket search with
//! weight rewind.
//!
//! A sparsification round co-trains weights and a real-valued mask for a
//! fixed number of iterations — weights through Adam at step `η`, the
//! mask through plain SGD at step `λ`, no decay on mask entries — then
//! zeroes the fraction `p` of lowest-|m| entries among those not already
//! pruned and sets the rest to one. The ticket search repeats rounds,
//! rewinding weights to the initial snapshot `W⁰` after each, until the
//! target sparsity is reached or a round cap gives up.
//!
//! Masks cover the linear-transform weight matrices (for quaternion
//! layers, each real component entry independently); biases and
//! attention vectors stay dense. A pruned entry is frozen: it stays zero
//! through every later round and training step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{bind_params, MaskMode, ModelParams};
use crate::optim::Adam;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{task_loss, LossScope, TaskData, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPhase {
    Soft,
    Hard,
}

/// Per-parameter mask. `frozen` marks entries pruned in earlier rounds;
/// their values are pinned at zero.
#[derive(Debug, Clone)]
pub struct Mask {
    pub values: Vec<f64>,
    pub frozen: Vec<bool>,
    pub phase: MaskPhase,
}

impl Mask {
    fn ones(len: usize) -> Self {
        Self {
            values: vec![1.0; len],
            frozen: vec![false; len],
            phase: MaskPhase::Hard,
        }
    }
}

/// Masks aligned index-for-index with a [`crate::tape::ParamSet`];
/// `None` for parameters that are not prunable.
#[derive(Debug, Clone, Default)]
pub struct MaskSet {
    pub masks: Vec<Option<Mask>>,
}

impl MaskSet {
    /// All-ones hard masks over every prunable parameter.
    pub fn ones_for(mp: &ModelParams) -> Self {
        Self {
            masks: mp
                .set
                .params
                .iter()
                .map(|p| p.prunable.then(|| Mask::ones(p.value.len())))
                .collect(),
        }
    }

    pub fn values(&self, param_idx: usize) -> Option<&[f64]> {
        self.masks
            .get(param_idx)
            .and_then(|m| m.as_ref())
            .map(|m| m.values.as_slice())
    }

    /// Mask values shaped like the parameter, for insertion on a tape.
    pub fn mask_tensor(&self, param_idx: usize, param_value: &Tensor) -> Result<Option<Tensor>> {
        match self.masks.get(param_idx).and_then(|m| m.as_ref()) {
            None => Ok(None),
            Some(m) => {
                if m.values.len() != param_value.len() {
                    return Err(Error::Shape(format!(
                        "mask length {} does not match parameter length {}",
                        m.values.len(),
                        param_value.len()
                    )));
                }
                Ok(Some(Tensor::new(
                    param_value.shape().to_vec(),
                    m.values.clone(),
                )?))
            }
        }
    }

    /// Switch to the soft phase for a new round: surviving entries
    /// restart at 1, frozen entries stay 0.
    pub fn resoften(&mut self) {
        for m in self.masks.iter_mut().flatten() {
            for (v, &fr) in m.values.iter_mut().zip(&m.frozen) {
                *v = if fr { 0.0 } else { 1.0 };
            }
            m.phase = MaskPhase::Soft;
        }
    }

    pub fn total_entries(&self) -> usize {
        self.masks.iter().flatten().map(|m| m.values.len()).sum()
    }

    pub fn nonzero_entries(&self) -> usize {
        self.masks
            .iter()
            .flatten()
            .map(|m| m.values.iter().filter(|&&v| v != 0.0).count())
            .sum()
    }

    /// `1 − nonzeros/total`; defined on hard masks. Computed as
    /// `zeros/total` so exact targets like 0.2 compare cleanly.
    pub fn sparsity(&self) -> Result<f64> {
        if self
            .masks
            .iter()
            .flatten()
            .any(|m| m.phase != MaskPhase::Hard)
        {
            return Err(Error::Invalid("sparsity is defined on hard masks".into()));
        }
        let total = self.total_entries();
        if total == 0 {
            return Err(Error::Invalid("mask set covers no parameters".into()));
        }
        Ok((total - self.nonzero_entries()) as f64 / total as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Weight step size (Adam learning rate during sparsification).
    pub weight_step: f64,
    /// Mask step size (plain SGD).
    pub mask_step: f64,
    /// Gradient steps per sparsification round.
    pub iterations: usize,
    /// Fraction of surviving entries pruned per round.
    pub fraction: f64,
    /// Stop once achieved sparsity reaches this level.
    pub target_sparsity: f64,
    /// Give up after this many rounds and report the best achieved.
    pub round_cap: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            weight_step: 0.01,
            mask_step: 0.01,
            iterations: 100,
            fraction: 0.2,
            target_sparsity: 0.8,
            round_cap: 30,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::Invalid(format!(
                "prune fraction {} outside (0, 1)",
                self.fraction
            )));
        }
        if !(self.target_sparsity > 0.0 && self.target_sparsity < 1.0) {
            return Err(Error::Invalid(format!(
                "target sparsity {} outside (0, 1)",
                self.target_sparsity
            )));
        }
        if self.weight_step <= 0.0 || self.mask_step <= 0.0 {
            return Err(Error::Invalid("step sizes must be positive".into()));
        }
        if self.round_cap == 0 {
            return Err(Error::Invalid("round cap must be positive".into()));
        }
        Ok(())
    }
}

/// One sparsification round: `iterations` co-training steps with the
/// soft mask in the forward product, then global magnitude thresholding
/// of the mask. On return the mask is hard.
pub fn sparsify(
    mp: &mut ModelParams,
    task: &TaskData,
    masks: &mut MaskSet,
    cfg: &PruneConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    if cfg.iterations == 0 {
        return Err(Error::Invalid(
            "sparsification needs at least one iteration".into(),
        ));
    }
    if masks.masks.iter().flatten().next().is_none() {
        return Err(Error::Invalid("mask set covers no parameters".into()));
    }
    if masks
        .masks
        .iter()
        .flatten()
        .any(|m| m.phase != MaskPhase::Soft)
    {
        return Err(Error::Invalid("sparsify expects soft-phase masks".into()));
    }
    if masks.nonzero_entries() == 0 {
        return Err(Error::Invalid("all-zero mask cannot be sparsified".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(
        cfg.weight_step,
        train_cfg.weight_decay,
        train_cfg.adam,
        &mp.set,
    )?;

    // Graph tasks step one batch per iteration, reshuffling at wrap.
    let mut graph_order: Vec<usize> = Vec::new();
    let mut graph_pos = 0usize;

    for _ in 0..cfg.iterations {
        let batch: Option<Vec<usize>> = match task {
            TaskData::Graph(t) => {
                if graph_pos >= graph_order.len() {
                    graph_order = t.train_idx.clone();
                    graph_order.shuffle(&mut rng);
                    graph_pos = 0;
                }
                let hi = (graph_pos + t.batch_size).min(graph_order.len());
                let chunk = graph_order[graph_pos..hi].to_vec();
                graph_pos = hi;
                Some(chunk)
            }
            _ => None,
        };

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, mp, MaskMode::Soft(masks))?;
        let scope = match &batch {
            Some(chunk) => LossScope::GraphBatch(chunk),
            None => LossScope::TrainFull,
        };
        let loss = task_loss(&mut tape, mp, &bound, task, scope, Some(&mut rng))?;
        let loss_value = tape.value(loss).scalar_value();
        if !loss_value.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss {loss_value} during sparsification"
            )));
        }
        let mut grads = tape.backward(loss)?;
        for (i, &leaf) in bound.leaves.iter().enumerate() {
            mp.set.params[i].grad = grads
                .take(leaf)
                .unwrap_or_else(|| mp.set.params[i].value.zeros_like());
        }
        // Weight update through the run's optimizer; frozen entries gated.
        adam.step(&mut mp.set, Some(masks))?;

        // Mask update: plain SGD, no decay, frozen entries pinned at zero.
        for (i, leaf) in bound.mask_leaves.iter().enumerate() {
            let Some(leaf) = leaf else { continue };
            let Some(grad) = grads.take(*leaf) else {
                continue;
            };
            let mask = masks.masks[i].as_mut().expect("soft leaf implies mask");
            for (idx, g) in grad.data().iter().enumerate() {
                if !mask.frozen[idx] {
                    mask.values[idx] -= cfg.mask_step * g;
                }
            }
        }
    }

    threshold_global(masks, cfg.fraction);
    Ok(())
}

/// Among entries not already pruned, zero (and freeze) the `fraction`
/// with lowest |m| — count floored — and set the rest to one. Ties break
/// by ascending (parameter, flat index). Leaves every mask hard.
fn threshold_global(masks: &mut MaskSet, fraction: f64) {
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (i, m) in masks.masks.iter().enumerate() {
        let Some(m) = m else { continue };
        for (idx, (&v, &fr)) in m.values.iter().zip(&m.frozen).enumerate() {
            if !fr {
                entries.push((v.abs(), i, idx));
            }
        }
    }
    let prune_count = (fraction * entries.len() as f64).floor() as usize;
    entries.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    for (rank, &(_, i, idx)) in entries.iter().enumerate() {
        let mask = masks.masks[i].as_mut().unwrap();
        if rank < prune_count {
            mask.values[idx] = 0.0;
            mask.frozen[idx] = true;
        } else {
            mask.values[idx] = 1.0;
        }
    }
    for m in masks.masks.iter_mut().flatten() {
        m.phase = MaskPhase::Hard;
    }
}

/// The outcome of a ticket search: the initialization snapshot, the hard
/// mask, and what the schedule achieved.
#[derive(Debug, Clone)]
pub struct TicketState {
    pub w0: Vec<Tensor>,
    pub masks: MaskSet,
    pub sparsity: f64,
    pub rounds: usize,
    pub reached_target: bool,
}

/// Iterative search driver. Each [`TicketSearch::round`] re-softens the
/// mask, sparsifies, rewinds the weights to `W⁰`, and reports the
/// achieved sparsity, so callers can evaluate the ticket after any round.
pub struct TicketSearch<'a> {
    mp: &'a mut ModelParams,
    task: &'a TaskData,
    cfg: PruneConfig,
    train_cfg: TrainConfig,
    w0: Vec<Tensor>,
    masks: MaskSet,
    rounds: usize,
}

impl<'a> TicketSearch<'a> {
    /// Snapshot `W⁰` from a freshly initialized model.
    pub fn new(
        mp: &'a mut ModelParams,
        task: &'a TaskData,
        cfg: PruneConfig,
        train_cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        train_cfg.validate()?;
        let w0 = mp.set.snapshot_values();
        let masks = MaskSet::ones_for(mp);
        if masks.total_entries() == 0 {
            return Err(Error::Invalid("model has no prunable parameters".into()));
        }
        Ok(Self {
            mp,
            task,
            cfg,
            train_cfg,
            w0,
            masks,
            rounds: 0,
        })
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    pub fn w0(&self) -> &[Tensor] {
        &self.w0
    }

    /// One sparsification round followed by the rewind to `W⁰`.
    pub fn round(&mut self) -> Result<f64> {
        self.masks.resoften();
        let seed = self
            .train_cfg
            .seed
            .wrapping_add((self.rounds as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        sparsify(
            self.mp,
            self.task,
            &mut self.masks,
            &self.cfg,
            &self.train_cfg,
            seed,
        )?;
        self.mp.set.restore_values(&self.w0);
        self.rounds += 1;
        self.masks.sparsity()
    }

    pub fn ticket(&self) -> Result<TicketState> {
        let sparsity = self.masks.sparsity()?;
        Ok(TicketState {
            w0: self.w0.clone(),
            masks: self.masks.clone(),
            sparsity,
            rounds: self.rounds,
            reached_target: sparsity >= self.cfg.target_sparsity,
        })
    }

    /// Run rounds until the target sparsity is reached or the round cap
    /// is hit, returning the best achieved state.
    pub fn run_to_target(&mut self) -> Result<TicketState> {
        loop {
            let sparsity = self.round()?;
            if sparsity >= self.cfg.target_sparsity || self.rounds >= self.cfg.round_cap {
                return self.ticket();
            }
        }
    }
}

/// Algorithm-level entry point: search a freshly initialized model for a
/// winning ticket.
pub fn find_ticket(
    mp: &mut ModelParams,
    task: &TaskData,
    cfg: PruneConfig,
    train_cfg: TrainConfig,
) -> Result<TicketState> {
    TicketSearch::new(mp, task, cfg, train_cfg)?.run_to_target()
}
