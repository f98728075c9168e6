use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_with, ForwardOptions, GnnModel, Propagation};
use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeRole, SplitSpec, Task, Topology};
use crate::tensor::{dot, Tensor};

/// Full-batch gradient descent with momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Seeds negative resampling for link training.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.2,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy (node task) or loss (link task) on the validation split.
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub best_epoch: usize,
    pub best_val_metric: f64,
    /// Accuracy (node task) or ROC-AUC (link task) on the test split.
    pub test_metric: f64,
    pub train_metric: f64,
    pub history: Vec<EpochStats>,
}

/// Trains `model` in place and leaves it at the best validation epoch:
/// highest accuracy for node classification, lowest loss for links.
pub fn train(
    model: &mut GnnModel,
    graph: &Graph,
    split: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if split.task != model.task() {
        return Err(Error::invalid(format!(
            "split is for {} but the model is for {}",
            split.task,
            model.task()
        )));
    }
    if cfg.lr <= 0.0 || !(0.0..1.0).contains(&cfg.momentum) || cfg.weight_decay < 0.0 {
        return Err(Error::invalid("learning rate, momentum or weight decay out of range"));
    }
    match model.task() {
        Task::NodeClassification => train_node(model, graph, split, cfg),
        Task::LinkPrediction => train_link(model, graph, split, cfg),
    }
}

pub(crate) fn step(model: &mut GnnModel, grads: Vec<Tensor>, velocity: &mut [Tensor], cfg: &TrainConfig) {
    for ((param, g), v) in model.params_mut().into_iter().zip(grads).zip(velocity.iter_mut()) {
        let w = Arc::make_mut(param);
        for ((vv, &gg), &ww) in v.data_mut().iter_mut().zip(g.data()).zip(w.data()) {
            *vv = cfg.momentum * *vv + gg + cfg.weight_decay * ww;
        }
        w.add_scaled(v, -cfg.lr);
    }
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged {
            epoch,
            loss: f64::NAN,
        },
        other => other,
    }
}

fn accuracy(probs: &Tensor, labels: &[usize], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let hits = rows
        .iter()
        .filter(|&&r| {
            let row = probs.row(r);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            best == labels[r]
        })
        .count();
    hits as f64 / rows.len() as f64
}

fn train_node(
    model: &mut GnnModel,
    graph: &Graph,
    split: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let labels = graph
        .labels()
        .ok_or_else(|| Error::invalid("node classification needs labels"))?;
    let train_rows = split.nodes_with(NodeRole::Train);
    let mut valid_rows = split.nodes_with(NodeRole::Valid);
    if valid_rows.is_empty() {
        log::warn!("no validation nodes; selecting the epoch by training accuracy");
        valid_rows.clone_from(&train_rows);
    }
    let test_rows = split.nodes_with(NodeRole::Test);
    if train_rows.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let rows = Arc::new(train_rows.clone());
    let targets = Arc::new(train_rows.iter().map(|&r| labels[r]).collect::<Vec<_>>());
    let prop = Propagation::new(graph);
    let opts = ForwardOptions {
        params_require_grad: true,
        ..Default::default()
    };
    let mut velocity: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.rows(), p.cols()))
        .collect();
    let mut best: Option<(usize, f64, GnnModel)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..=cfg.epochs {
        let mut fwd = forward_with(model, graph, &prop, &opts).map_err(diverged(epoch))?;
        let probs = fwd.tape.shared_value(*fwd.hidden.last().expect("layers"));
        let val = accuracy(&probs, labels, &valid_rows);
        if best.as_ref().is_none_or(|b| val > b.1) {
            best = Some((epoch, val, model.clone()));
        }
        if epoch == cfg.epochs {
            break;
        }
        let logp = fwd.tape.log_softmax_rows(fwd.logits).map_err(diverged(epoch))?;
        let loss = fwd.tape.nll_rows(logp, &rows, &targets).map_err(diverged(epoch))?;
        let loss_value = fwd.tape.value(loss).data()[0];
        history.push(EpochStats {
            epoch,
            train_loss: loss_value,
            val_metric: val,
        });
        let mut grads = fwd.tape.backward(loss)?;
        let g: Vec<Tensor> = fwd.params.iter().map(|&v| grads.take(v)).collect();
        step(model, g, &mut velocity, cfg);
    }
    let (best_epoch, best_val, best_model) = best.expect("at least one epoch evaluated");
    *model = best_model;
    let pred = super::model_forward(model, graph, None)?;
    Ok(TrainReport {
        best_epoch,
        best_val_metric: best_val,
        test_metric: accuracy(pred.output(), labels, &test_rows),
        train_metric: accuracy(pred.output(), labels, &train_rows),
        history,
    })
}

fn sample_negatives(
    graph: &Graph,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let n = graph.num_nodes();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count && attempts < 100 * count.max(1) {
        attempts += 1;
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b && !graph.has_edge(a, b) {
            out.push((a, b));
        }
    }
    out
}

fn bce(z: &Tensor, pairs: &[(usize, usize)], target: f64) -> f64 {
    pairs
        .iter()
        .map(|&(i, j)| {
            let x = dot(z.row(i), z.row(j));
            x.max(0.0) - x * target + (-x.abs()).exp().ln_1p()
        })
        .sum()
}

/// Area under the ROC curve of positive vs negative scores (ties count half).
pub(crate) fn roc_auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0;
        rank_sum += all[i..j].iter().filter(|x| x.1).count() as f64 * avg_rank;
        i = j;
    }
    let np = pos.len() as f64;
    (rank_sum - np * (np + 1.0) / 2.0) / (np * neg.len() as f64)
}

fn train_link(
    model: &mut GnnModel,
    graph: &Graph,
    split: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if split.train_edges.is_empty() {
        return Err(Error::invalid("empty training edge set"));
    }
    let message = split.message_graph(graph)?;
    let message: &Graph = &message;
    let prop = Propagation::new(message);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.rows(), p.cols()))
        .collect();
    let n_val = split.valid_edges.len() + split.valid_negatives.len();
    let mut best: Option<(usize, f64, GnnModel)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let n_pos = split.train_edges.len();
    for epoch in 0..=cfg.epochs {
        let mut pairs = split.train_edges.clone();
        pairs.extend(sample_negatives(graph, n_pos, &mut rng));
        let targets: Vec<f64> = (0..pairs.len()).map(|k| if k < n_pos { 1.0 } else { 0.0 }).collect();
        let opts = ForwardOptions {
            params_require_grad: true,
            edges: Some(Arc::new(pairs)),
            ..Default::default()
        };
        let mut fwd = forward_with(model, message, &prop, &opts).map_err(diverged(epoch))?;
        let z = fwd.tape.shared_value(fwd.logits);
        let val_loss = if n_val == 0 {
            0.0
        } else {
            (bce(&z, &split.valid_edges, 1.0) + bce(&z, &split.valid_negatives, 0.0)) / n_val as f64
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: val_loss,
            });
        }
        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((epoch, val_loss, model.clone()));
        }
        if epoch == cfg.epochs {
            break;
        }
        let logits = fwd.edge_logits.expect("link forward scores edges");
        let loss = fwd
            .tape
            .bce_with_logits(logits, &Arc::new(targets))
            .map_err(diverged(epoch))?;
        history.push(EpochStats {
            epoch,
            train_loss: fwd.tape.value(loss).data()[0],
            val_metric: val_loss,
        });
        let mut grads = fwd.tape.backward(loss)?;
        let g: Vec<Tensor> = fwd.params.iter().map(|&v| grads.take(v)).collect();
        step(model, g, &mut velocity, cfg);
    }
    let (best_epoch, best_val, best_model) = best.expect("at least one epoch evaluated");
    *model = best_model;
    let pred = super::model_forward(model, message, None)?;
    let z = pred.output();
    let score = |pairs: &[(usize, usize)]| -> Vec<f64> {
        pairs.iter().map(|&(i, j)| sigmoid(dot(z.row(i), z.row(j)))).collect()
    };
    Ok(TrainReport {
        best_epoch,
        best_val_metric: best_val,
        test_metric: roc_auc(&score(&split.test_edges), &score(&split.test_negatives)),
        train_metric: roc_auc(&score(&split.train_edges), &score(&split.train_negatives)),
        history,
    })
}
