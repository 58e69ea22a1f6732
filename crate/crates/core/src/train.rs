//! Full-batch training with Adam, validation-loss early stopping, and
//! best-checkpoint restore.
//!
//! One run is sequential and deterministic under its seed: parameter
//! initialization is seeded separately, and all in-run randomness
//! (dropout masks, link-negative resampling, graph batch order) comes
//! from one per-run stream. Test data is never touched until the best
//! checkpoint has been restored; the evaluation gate turns a violation
//! into an error.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{
    make_splits, sample_negative_edges, Graph, GraphDataset, SplitMasks, SplitSpec,
};
use crate::layers::{
    bind_params, graph_head_forward, link_logits, model_forward, prepare_batch, prepare_graph,
    BoundModel, ForwardOpts, GraphTensors, MaskMode, ModelParams, TaskHead,
};
use crate::metrics::{accuracy, roc_auc_pos_neg};
use crate::optim::{Adam, AdamConfig};
use crate::pruning::MaskSet;
use crate::tape::{Tape, Var};

pub const DEFAULT_GRAPH_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            weight_decay: 5e-4,
            dropout: 0.6,
            max_epochs: 1000,
            patience: 200,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Invalid("rates must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Invalid(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Invalid("max_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub best_val_loss: f64,
    pub test_metric: f64,
    pub metric_name: &'static str,
    pub epochs_to_best: usize,
    pub epochs_run: usize,
    pub param_count: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct NodeTask {
    pub gt: GraphTensors,
    pub labels: Arc<Vec<usize>>,
    pub train_rows: Arc<Vec<usize>>,
    pub val_rows: Arc<Vec<usize>>,
    pub test_rows: Arc<Vec<usize>>,
    /// Non-dummy class count used by loss targets and accuracy.
    pub eligible_classes: usize,
}

#[derive(Debug, Clone)]
pub struct LinkTask {
    /// Message-passing graph built from train positives only.
    pub gt: GraphTensors,
    pub num_nodes: usize,
    pub train_pos: Vec<(usize, usize)>,
    pub val_pos: Vec<(usize, usize)>,
    pub val_neg: Vec<(usize, usize)>,
    pub test_pos: Vec<(usize, usize)>,
    pub test_neg: Vec<(usize, usize)>,
    /// Every true edge of the original graph; excluded when resampling
    /// train negatives.
    pub edge_set: Arc<HashSet<(usize, usize)>>,
}

#[derive(Debug, Clone)]
pub struct GraphTask {
    pub graphs: Vec<Graph>,
    pub labels: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub eligible_classes: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub enum TaskData {
    Node(NodeTask),
    Link(LinkTask),
    Graph(GraphTask),
}

impl TaskData {
    pub fn head(&self) -> TaskHead {
        match self {
            TaskData::Node(_) => TaskHead::NodeClassify,
            TaskData::Link(_) => TaskHead::LinkDecode,
            TaskData::Graph(_) => TaskHead::GraphClassify,
        }
    }

    pub fn metric_name(&self) -> &'static str {
        match self {
            TaskData::Node(_) | TaskData::Graph(_) => "accuracy",
            TaskData::Link(_) => "roc_auc",
        }
    }
}

/// Node-classification task from a (possibly padded) graph and a split
/// over its nodes.
pub fn node_task(g: &Graph, split: &SplitSpec, eligible_classes: usize) -> Result<TaskData> {
    if g.labels.len() != g.num_nodes {
        return Err(Error::Invalid("node task requires node labels".into()));
    }
    let masks = make_splits(g.num_nodes, split)?;
    Ok(TaskData::Node(NodeTask {
        gt: prepare_graph(g),
        labels: Arc::new(g.labels.clone()),
        train_rows: Arc::new(SplitMasks::indices(&masks.train)),
        val_rows: Arc::new(SplitMasks::indices(&masks.val)),
        test_rows: Arc::new(SplitMasks::indices(&masks.test)),
        eligible_classes,
    }))
}

/// Link-prediction task: the edge set is partitioned, validation/test
/// positives are removed from the message adjacency, and fixed
/// equal-count negatives are sampled per evaluation split.
pub fn link_task(g: &Graph, split: &SplitSpec) -> Result<TaskData> {
    let masks = make_splits(g.edges.len(), split)?;
    let pick = |mask: &[bool]| -> Vec<(usize, usize)> {
        mask.iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(g.edges[i]))
            .collect()
    };
    let train_pos = pick(&masks.train);
    let val_pos = pick(&masks.val);
    let test_pos = pick(&masks.test);
    if train_pos.is_empty() {
        return Err(Error::Invalid("link task has no training edges".into()));
    }
    // Message graph keeps train positives only.
    let msg_graph = Graph::from_parts(
        g.num_nodes,
        &train_pos,
        g.features.clone(),
        g.labels.clone(),
    )?;
    let val_neg = if val_pos.is_empty() {
        Vec::new()
    } else {
        sample_negative_edges(g, val_pos.len(), split.seed.wrapping_add(1))?
    };
    let test_neg = if test_pos.is_empty() {
        Vec::new()
    } else {
        sample_negative_edges(g, test_pos.len(), split.seed.wrapping_add(2))?
    };
    Ok(TaskData::Link(LinkTask {
        gt: prepare_graph(&msg_graph),
        num_nodes: g.num_nodes,
        train_pos,
        val_pos,
        val_neg,
        test_pos,
        test_neg,
        edge_set: Arc::new(g.edges.iter().copied().collect()),
    }))
}

/// Graph-classification task over a (possibly padded) dataset.
pub fn graph_task(
    ds: &GraphDataset,
    split: &SplitSpec,
    eligible_classes: usize,
    batch_size: usize,
) -> Result<TaskData> {
    let masks = make_splits(ds.graphs.len(), split)?;
    Ok(TaskData::Graph(GraphTask {
        graphs: ds.graphs.clone(),
        labels: ds.labels.clone(),
        train_idx: SplitMasks::indices(&masks.train),
        val_idx: SplitMasks::indices(&masks.val),
        test_idx: SplitMasks::indices(&masks.test),
        eligible_classes,
        batch_size: batch_size.max(1),
    }))
}

/// What a single loss evaluation covers.
pub enum LossScope<'a> {
    /// Training loss over the full train split (link negatives are
    /// resampled from the provided stream).
    TrainFull,
    /// Training loss over one batch of graph indices.
    GraphBatch(&'a [usize]),
    /// Validation loss on the fixed validation split, no dropout.
    Val,
}

fn uniform_negatives(
    n: usize,
    count: usize,
    exclude: &HashSet<(usize, usize)>,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a == b {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if exclude.contains(&key) {
            continue;
        }
        out.push(key);
    }
    out
}

/// Build the scalar task loss on the tape. `rng` is required for
/// training scopes (dropout, negative resampling).
pub fn task_loss(
    tape: &mut Tape,
    mp: &ModelParams,
    bound: &BoundModel,
    task: &TaskData,
    scope: LossScope,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    match task {
        TaskData::Node(t) => {
            let (training, rows) = match scope {
                LossScope::TrainFull => (true, Arc::clone(&t.train_rows)),
                LossScope::Val => (false, Arc::clone(&t.val_rows)),
                LossScope::GraphBatch(_) => {
                    return Err(Error::Invalid("graph batch scope on a node task".into()))
                }
            };
            let rows = if rows.is_empty() {
                // Degenerate split (no validation items): fall back to the
                // training rows evaluated without dropout.
                Arc::clone(&t.train_rows)
            } else {
                rows
            };
            let mut fallback = ChaCha8Rng::seed_from_u64(0);
            let rng = rng.unwrap_or(&mut fallback);
            let h = model_forward(tape, mp, bound, &t.gt, ForwardOpts { training }, rng)?;
            let logp = tape.log_softmax(h);
            let labels: Vec<usize> = rows.iter().map(|&r| t.labels[r]).collect();
            tape.nll_loss(logp, rows, Arc::new(labels))
        }
        TaskData::Link(t) => {
            let training = matches!(scope, LossScope::TrainFull);
            let (pos, neg): (&[(usize, usize)], Vec<(usize, usize)>) = match scope {
                LossScope::TrainFull => {
                    let rng = rng.as_deref_mut();
                    let rng = match rng {
                        Some(r) => r,
                        None => return Err(Error::Invalid("training scope needs an rng".into())),
                    };
                    let neg = uniform_negatives(t.num_nodes, t.train_pos.len(), &t.edge_set, rng);
                    (&t.train_pos, neg)
                }
                LossScope::Val => {
                    if t.val_pos.is_empty() {
                        // Degenerate split: score training edges instead.
                        let mut r = ChaCha8Rng::seed_from_u64(1);
                        let neg =
                            uniform_negatives(t.num_nodes, t.train_pos.len(), &t.edge_set, &mut r);
                        (&t.train_pos, neg)
                    } else {
                        (&t.val_pos, t.val_neg.clone())
                    }
                }
                LossScope::GraphBatch(_) => {
                    return Err(Error::Invalid("graph batch scope on a link task".into()))
                }
            };
            let mut fallback = ChaCha8Rng::seed_from_u64(0);
            let rng = rng.unwrap_or(&mut fallback);
            let h = model_forward(tape, mp, bound, &t.gt, ForwardOpts { training }, rng)?;
            let mut pairs: Vec<(usize, usize)> = pos.to_vec();
            let pos_count = pairs.len();
            pairs.extend(neg.iter().copied());
            let logits = link_logits(tape, h, &pairs)?;
            let mut targets = vec![1.0; pos_count];
            targets.extend(std::iter::repeat(0.0).take(pairs.len() - pos_count));
            tape.bce_with_logits(logits, Arc::new(targets))
        }
        TaskData::Graph(t) => {
            let (training, idx): (bool, Vec<usize>) = match scope {
                LossScope::TrainFull => (true, t.train_idx.clone()),
                LossScope::GraphBatch(batch) => (true, batch.to_vec()),
                LossScope::Val => (
                    false,
                    if t.val_idx.is_empty() {
                        t.train_idx.clone()
                    } else {
                        t.val_idx.clone()
                    },
                ),
            };
            if idx.is_empty() {
                return Err(Error::Invalid("graph task: empty index set".into()));
            }
            let members: Vec<&Graph> = idx.iter().map(|&i| &t.graphs[i]).collect();
            let (gt, boundaries) = prepare_batch(&members)?;
            let mut fallback = ChaCha8Rng::seed_from_u64(0);
            let rng = rng.unwrap_or(&mut fallback);
            let h = model_forward(tape, mp, bound, &gt, ForwardOpts { training }, rng)?;
            let logits = graph_head_forward(tape, mp, bound, h, boundaries)?;
            let logp = tape.log_softmax(logits);
            let rows: Vec<usize> = (0..idx.len()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| t.labels[i]).collect();
            tape.nll_loss(logp, Arc::new(rows), Arc::new(labels))
        }
    }
}

/// Guards the ordering "restore best checkpoint, then touch test data".
pub struct EvalGate {
    restored_best: bool,
}

impl EvalGate {
    pub fn new() -> Self {
        Self {
            restored_best: false,
        }
    }

    pub fn mark_restored(&mut self) {
        self.restored_best = true;
    }

    fn assert_test_allowed(&self) -> Result<()> {
        if !self.restored_best {
            return Err(Error::Invalid(
                "test split evaluated before the best checkpoint was restored".into(),
            ));
        }
        Ok(())
    }
}

impl Default for EvalGate {
    fn default() -> Self {
        Self::new()
    }
}

/// Evaluation-mode forward pass returning the tape, the bound
/// parameters, and the final node states.
fn eval_states(mp: &ModelParams, gt: &GraphTensors) -> Result<(Tape, BoundModel, Var)> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, mp, MaskMode::None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = model_forward(
        &mut tape,
        mp,
        &bound,
        gt,
        ForwardOpts { training: false },
        &mut rng,
    )?;
    Ok((tape, bound, h))
}

/// Test metric behind the evaluation gate.
pub fn evaluate_test_metric(mp: &ModelParams, task: &TaskData, gate: &EvalGate) -> Result<f64> {
    gate.assert_test_allowed()?;
    match task {
        TaskData::Node(t) => {
            let (tape, _, h) = eval_states(mp, &t.gt)?;
            accuracy(tape.value(h), &t.labels, &t.test_rows, t.eligible_classes)
        }
        TaskData::Link(t) => {
            if t.test_pos.is_empty() {
                return Err(Error::Invalid("link task has no test edges".into()));
            }
            let (mut tape, _, h) = eval_states(mp, &t.gt)?;
            let pos = link_logits(&mut tape, h, &t.test_pos)?;
            let neg = link_logits(&mut tape, h, &t.test_neg)?;
            roc_auc_pos_neg(tape.value(pos).data(), tape.value(neg).data())
        }
        TaskData::Graph(t) => {
            if t.test_idx.is_empty() {
                return Err(Error::Invalid("graph task has no test graphs".into()));
            }
            graph_split_accuracy(mp, t, &t.test_idx)
        }
    }
}

fn graph_split_accuracy(mp: &ModelParams, t: &GraphTask, idx: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in idx.chunks(t.batch_size) {
        let members: Vec<&Graph> = chunk.iter().map(|&i| &t.graphs[i]).collect();
        let (gt, boundaries) = prepare_batch(&members)?;
        let (mut tape, bound, h) = eval_states(mp, &gt)?;
        let logits = graph_head_forward(&mut tape, mp, &bound, h, boundaries)?;
        let logits = tape.value(logits);
        for (row, &gi) in chunk.iter().enumerate() {
            let scores = logits.row(row);
            let classes = t.eligible_classes.min(scores.len());
            let mut best = 0usize;
            for c in 1..classes {
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            if best == t.labels[gi] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// Training accuracy (or ROC-AUC for link tasks) on the train split;
/// used by fixture tests.
pub fn evaluate_train_metric(mp: &ModelParams, task: &TaskData) -> Result<f64> {
    match task {
        TaskData::Node(t) => {
            let (tape, _, h) = eval_states(mp, &t.gt)?;
            accuracy(tape.value(h), &t.labels, &t.train_rows, t.eligible_classes)
        }
        TaskData::Link(t) => {
            let (mut tape, _, h) = eval_states(mp, &t.gt)?;
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let neg = uniform_negatives(t.num_nodes, t.train_pos.len(), &t.edge_set, &mut rng);
            let pos = link_logits(&mut tape, h, &t.train_pos)?;
            let negs = link_logits(&mut tape, h, &neg)?;
            roc_auc_pos_neg(tape.value(pos).data(), tape.value(negs).data())
        }
        TaskData::Graph(t) => graph_split_accuracy(mp, t, &t.train_idx),
    }
}

fn validation_loss(mp: &ModelParams, task: &TaskData, masks: Option<&MaskSet>) -> Result<f64> {
    let mut tape = Tape::new();
    let mode = match masks {
        Some(ms) => MaskMode::Hard(ms),
        None => MaskMode::None,
    };
    let bound = bind_params(&mut tape, mp, mode)?;
    let loss = task_loss(&mut tape, mp, &bound, task, LossScope::Val, None)?;
    Ok(tape.value(loss).scalar_value())
}

fn masked_positions_snapshot(mp: &ModelParams, masks: &MaskSet) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for (i, p) in mp.set.params.iter().enumerate() {
        if let Some(vals) = masks.values(i) {
            for (idx, &m) in vals.iter().enumerate() {
                if m == 0.0 {
                    out.push((i, idx, p.value.data()[idx]));
                }
            }
        }
    }
    out
}

/// One gradient step over the training scope. Returns the training loss.
fn train_step(
    mp: &mut ModelParams,
    task: &TaskData,
    scope: LossScope,
    masks: Option<&MaskSet>,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mode = match masks {
        Some(ms) => MaskMode::Hard(ms),
        None => MaskMode::None,
    };
    let bound = bind_params(&mut tape, mp, mode)?;
    let loss = task_loss(&mut tape, mp, &bound, task, scope, Some(rng))?;
    let loss_value = tape.value(loss).scalar_value();
    let mut grads = tape.backward(loss)?;
    for (i, &leaf) in bound.leaves.iter().enumerate() {
        mp.set.params[i].grad = grads
            .take(leaf)
            .unwrap_or_else(|| mp.set.params[i].value.zeros_like());
    }
    adam.step(&mut mp.set, masks)?;
    Ok(loss_value)
}

/// Train a model in place under the given protocol, restoring the best
/// validation checkpoint before the single test evaluation.
pub fn train(
    mp: &mut ModelParams,
    task: &TaskData,
    cfg: &TrainConfig,
    masks: Option<&MaskSet>,
) -> Result<RunResult> {
    cfg.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, cfg.weight_decay, cfg.adam, &mp.set)?;
    let mut gate = EvalGate::new();

    // Positions that must never move while masked.
    let frozen = masks.map(|ms| masked_positions_snapshot(mp, ms));

    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snapshot = mp.set.snapshot_values();
    let mut epochs_run = 0usize;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let train_loss = match task {
            TaskData::Graph(t) => {
                let mut order = t.train_idx.clone();
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng);
                let mut total = 0.0;
                let mut batches = 0usize;
                for chunk in order.chunks(t.batch_size) {
                    total += train_step(
                        mp,
                        task,
                        LossScope::GraphBatch(chunk),
                        masks,
                        &mut adam,
                        &mut rng,
                    )?;
                    batches += 1;
                }
                total / batches.max(1) as f64
            }
            _ => train_step(mp, task, LossScope::TrainFull, masks, &mut adam, &mut rng)?,
        };
        if !train_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite training loss {train_loss} at epoch {epoch}"
            )));
        }
        if let Some(frozen) = &frozen {
            for &(i, idx, w0) in frozen {
                let now = mp.set.params[i].value.data()[idx];
                if now.to_bits() != w0.to_bits() {
                    return Err(Error::Diverged(format!(
                        "masked weight moved at epoch {epoch}: param {i} entry {idx}"
                    )));
                }
            }
        }

        let val_loss = validation_loss(mp, task, masks)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_snapshot = mp.set.snapshot_values();
        }
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    mp.set.restore_values(&best_snapshot);
    gate.mark_restored();
    let test_metric = evaluate_test_metric(mp, task, &gate)?;

    Ok(RunResult {
        best_val_loss: best_val,
        test_metric,
        metric_name: task.metric_name(),
        epochs_to_best: best_epoch,
        epochs_run,
        param_count: mp.count_params(),
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}
