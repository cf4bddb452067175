//! Mini-batch training.
//!
//! A batch gradient is computed in three stages. The global representation
//! `H^g` of every item is built once on a shared tape. Each example then
//! runs on its own tape, with the rows of `H^g` it needs as a leaf, and
//! returns its parameter gradients plus `∂L/∂H^g` for those rows. Finally the
//! summed `∂L/∂H^g` is pushed back through the shared tape. Examples may run
//! in parallel; their results are summed in example order.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, DEFAULT_K};
use crate::graph::GlobalGraph;
use crate::model::{Model, NextBehavior};
use crate::optim::Adam;
use crate::par::Execution;
use crate::scope::Scope;
use crate::sessions::SessionExample;

/// Gradient of the mean batch loss, indexed like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub grads: Vec<Vec<f64>>,
    pub loss: f64,
    pub item_loss_sum: f64,
    pub behavior_loss_sum: f64,
}

struct ExampleResult {
    params: Vec<(usize, Vec<f64>)>,
    rows: Vec<usize>,
    hg_grad: Option<Vec<f64>>,
    joint: f64,
    item: f64,
    behavior: f64,
}

fn example_gradient(
    model: &Model,
    graph: &GlobalGraph,
    hg: &Tensor,
    ex: &SessionExample,
    scale: f64,
) -> Result<ExampleResult> {
    let support = model.support(graph, &ex.prefix);
    let mut tape = Tape::new();
    let mut s = Scope::lazy(&mut tape, model.params(), true);
    let local = s.tape.leaf(hg.select_rows(&support.rows), true);
    let out = model.forward_example(&mut s, local, &support, &ex.prefix, NextBehavior::Given(ex.target_behavior))?;
    let losses = model.losses(&mut s, &out, ex.target_item, ex.target_behavior)?;
    let scaled = s.tape.scalar_mul(losses.joint, scale)?;
    s.tape.backward(scaled)?;
    let bound: Vec<_> = s.bound_params().collect();
    let params = bound
        .into_iter()
        .filter_map(|(idx, var)| tape.take_grad(var).map(|g| (idx, g)))
        .collect();
    let joint = tape.value(losses.joint).item()?;
    if !joint.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok(ExampleResult {
        params,
        rows: support.rows,
        hg_grad: tape.take_grad(local),
        joint,
        item: tape.value(losses.item).item()?,
        behavior: tape.value(losses.behavior).item()?,
    })
}

/// Gradient of the mean teacher-forced loss over `batch`.
pub fn batch_gradients(
    model: &Model,
    graph: &GlobalGraph,
    batch: &[&SessionExample],
    exec: Execution,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    model.check_graph(graph)?;
    let params = model.params();
    let mut main = Tape::new();
    let mut shared = Scope::lazy(&mut main, params, true);
    let hg = model.global_repr(&mut shared, graph)?;
    let shared_params: Vec<_> = shared.bound_params().collect();
    let hg_value = main.value(hg).clone();

    let scale = 1.0 / batch.len() as f64;
    let results = exec.map(batch, |ex| example_gradient(model, graph, &hg_value, ex, scale));

    let mut grads: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let d = hg_value.cols();
    let mut hg_grad = Tensor::zeros(hg_value.rows(), d);
    let (mut loss, mut item, mut behavior) = (0.0, 0.0, 0.0);
    for r in results {
        let r = r?;
        for (idx, g) in r.params {
            grads[idx].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        if let Some(g) = r.hg_grad {
            for (k, &row) in r.rows.iter().enumerate() {
                let dst = hg_grad.row_slice_mut(row);
                dst.iter_mut().zip(&g[k * d..(k + 1) * d]).for_each(|(a, b)| *a += b);
            }
        }
        loss += r.joint * scale;
        item += r.item;
        behavior += r.behavior;
    }

    main.backward_with(hg, &hg_grad)?;
    for (idx, var) in shared_params {
        if let Some(g) = main.grad(var) {
            grads[idx].iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    Ok(BatchGradients { grads, loss, item_loss_sum: item, behavior_loss_sum: behavior })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_item")]
    pub l_item: f64,
    #[serde(rename = "L_bhv")]
    pub l_bhv: f64,
    pub lr: f64,
    #[serde(rename = "val_HR@20")]
    pub val_hr: Option<f64>,
    #[serde(rename = "val_MRR@20")]
    pub val_mrr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The best-validation model, or the last one without validation data.
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

pub fn write_log_jsonl(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::new();
    for e in log {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains a fresh model seeded by `config.seed`.
pub fn train(
    train: &[SessionExample],
    valid: &[SessionExample],
    graph: &GlobalGraph,
    config: &ModelConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let model = Model::new(config.clone(), graph.n_items(), graph.behaviors().len())?;
    train_model(model, train, valid, graph, on_epoch)
}

/// Trains `model` for `config.epochs` epochs of shuffled mini-batches,
/// keeping the epoch with the best validation HR@20 (earliest on ties).
pub fn train_model(
    mut model: Model,
    train: &[SessionExample],
    valid: &[SessionExample],
    graph: &GlobalGraph,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    model.check_graph(graph)?;
    let config = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(model.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 0..config.epochs {
        let lr = config.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let (mut item, mut behavior) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&SessionExample> = chunk.iter().map(|&i| &train[i]).collect();
            let g = batch_gradients(&model, graph, &batch, config.execution)?;
            adam.step(model.params_mut(), &g.grads, lr)?;
            item += g.item_loss_sum;
            behavior += g.behavior_loss_sum;
        }
        let n = train.len() as f64;
        let (val_hr, val_mrr) = if valid.is_empty() {
            (None, None)
        } else {
            let r = evaluate(&model, graph, valid, config.task, DEFAULT_K, config.execution)?;
            (r.overall.hr_at_k, r.overall.mrr_at_k)
        };
        let entry = EpochLog { epoch, l_item: item / n, l_bhv: behavior / n, lr, val_hr, val_mrr };
        on_epoch(&entry);
        log.push(entry);
        if let Some(hr) = val_hr {
            if best.as_ref().is_none_or(|(b, _, _)| hr > *b) {
                best = Some((hr, epoch, model.clone()));
            }
        }
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (config.epochs.saturating_sub(1), model),
    };
    Ok(TrainOutcome { model, best_epoch, log })
}
