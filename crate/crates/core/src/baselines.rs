//! Two learned baselines: a node mask optimized against the prediction
//! change, and GCN regressors trained directly on a few oracle labels.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AggPlan, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::pearson;
use crate::gnn::{
    forward_with, Activation, ForwardOptions, GnnLayer, GnnModel, Head, LayerKind, Propagation,
    TrainConfig,
};
use crate::gnn::train::step;
use crate::graph::{Graph, Task, Topology};
use crate::oracle::validate_edge_set;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub lr: f64,
    /// Weight of `‖m‖₁`, pulling the mask to zero.
    pub alpha_reg: f64,
    /// Weight of `‖1 − m‖₁`, pulling the mask to one.
    pub beta_reg: f64,
    pub epochs: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            lr: 0.01,
            alpha_reg: 0.2,
            beta_reg: 0.1,
            epochs: 200,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("mask lr {} must be positive", self.lr)));
        }
        if !(self.alpha_reg >= 0.0 && self.beta_reg >= 0.0) {
            return Err(Error::invalid("mask regularizer weights must be nonnegative"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("mask optimization needs at least one epoch"));
        }
        Ok(())
    }
}

/// Small search grid over step size and regularizer balance.
pub fn default_mask_grid() -> Vec<MaskConfig> {
    let mut grid = Vec::new();
    for lr in [0.001, 0.01] {
        for (alpha_reg, beta_reg) in [(0.1, 0.0), (0.5, 0.25), (1.0, 0.5)] {
            grid.push(MaskConfig {
                lr,
                alpha_reg,
                beta_reg,
                epochs: 100,
            });
        }
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskHealth {
    Ok,
    /// Every entry reached 0: all scores are 1.
    Collapsed,
    /// Every entry stayed at 1: all scores are 0.
    Saturated,
}

impl MaskHealth {
    fn of(m: &[f64]) -> MaskHealth {
        if m.iter().all(|&v| v <= 0.0) {
            MaskHealth::Collapsed
        } else if m.iter().all(|&v| v >= 1.0) {
            MaskHealth::Saturated
        } else {
            MaskHealth::Ok
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRun {
    pub config: MaskConfig,
    pub mask: Vec<f64>,
    /// `1 − m`.
    pub scores: Vec<f64>,
    pub best_epoch: usize,
    /// Pearson on the validation labels at `best_epoch` (NaN without labels).
    pub val_pearson: f64,
    /// `Σ‖Δ‖₁` per epoch, before the step.
    pub change_history: Vec<f64>,
    pub health: MaskHealth,
}

/// Oracle labels used to pick the epoch and the grid point.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub ids: &'a [usize],
    pub values: &'a [f64],
}

impl Validation<'_> {
    fn check(&self, n: usize) -> Result<()> {
        if self.ids.len() != self.values.len() {
            return Err(Error::invalid("validation ids and values differ in length"));
        }
        if self.ids.len() < 3 {
            return Err(Error::invalid("validation needs at least 3 labeled nodes"));
        }
        match self.ids.iter().find(|&&i| i >= n) {
            Some(&node) => Err(Error::NodeOutOfRange { node, num_nodes: n }),
            None => Ok(()),
        }
    }

    fn pearson(&self, scores: &[f64]) -> f64 {
        let picked: Vec<f64> = self.ids.iter().map(|&i| scores[i]).collect();
        pearson(&picked, self.values).unwrap_or(f64::NAN)
    }
}

/// The prediction vector a mask acts on: class probabilities for nodes,
/// link probabilities for the evaluation pairs.
fn prediction_var(fwd: &crate::gnn::Forward, task: Task) -> Result<Var> {
    match task {
        Task::NodeClassification => Ok(*fwd.hidden.last().expect("at least one layer")),
        Task::LinkPrediction => fwd
            .edge_probs
            .ok_or_else(|| Error::invalid("link model needs evaluation edges")),
    }
}

/// Predictions of `model` with node mask `m` applied in every layer.
pub fn masked_prediction(
    model: &GnnModel,
    graph: &Graph,
    mask: &[f64],
    eval_edges: Option<&[(usize, usize)]>,
) -> Result<Tensor> {
    let opts = mask_options(model, graph, mask, eval_edges, false)?;
    let fwd = forward_with(model, graph, &Propagation::new(graph), &opts)?;
    Ok(fwd.tape.value(prediction_var(&fwd, model.task())?).clone())
}

fn mask_options(
    model: &GnnModel,
    graph: &Graph,
    mask: &[f64],
    eval_edges: Option<&[(usize, usize)]>,
    requires_grad: bool,
) -> Result<ForwardOptions> {
    if mask.len() != graph.num_nodes() {
        return Err(Error::Shape {
            op: "mask",
            lhs: (mask.len(), 1),
            rhs: (graph.num_nodes(), 1),
        });
    }
    let edges = match (model.task(), eval_edges) {
        (Task::LinkPrediction, Some(e)) => {
            validate_edge_set(graph.num_nodes(), e)?;
            Some(Arc::new(e.to_vec()))
        }
        (Task::LinkPrediction, None) => return Err(Error::EmptyEdgeSet),
        (Task::NodeClassification, _) => None,
    };
    Ok(ForwardOptions {
        mask: Some(Arc::new(Tensor::column(mask.to_vec()))),
        mask_requires_grad: requires_grad,
        edges,
        ..Default::default()
    })
}

/// Projected gradient descent on `m ∈ [0,1]^N` from `m = 1`, minimizing
/// `−Σ‖Δ‖₁ + α‖m‖₁ + β‖1 − m‖₁` with frozen weights. With validation
/// labels the epoch whose scores correlate best with them is kept,
/// otherwise the final mask.
pub fn optimize_mask(
    model: &GnnModel,
    graph: &Graph,
    cfg: &MaskConfig,
    eval_edges: Option<&[(usize, usize)]>,
    validation: Option<Validation<'_>>,
) -> Result<MaskRun> {
    cfg.validate()?;
    let n = graph.num_nodes();
    if let Some(v) = &validation {
        v.check(n)?;
    }
    let prop = Propagation::new(graph);
    let mut mask = vec![1.0; n];
    let base = Arc::new(masked_prediction(model, graph, &mask, eval_edges)?);
    // d/dm of the two regularizers on the box interior
    let reg_grad = cfg.alpha_reg - cfg.beta_reg;
    let score_of = |m: &[f64]| m.iter().map(|v| 1.0 - v).collect::<Vec<f64>>();
    let mut best = (0, f64::NEG_INFINITY, mask.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let opts = mask_options(model, graph, &mask, eval_edges, true)?;
        let mut fwd = forward_with(model, graph, &prop, &opts).map_err(|e| diverged(e, epoch))?;
        let pred = prediction_var(&fwd, model.task())?;
        let tape = &mut fwd.tape;
        let b = tape.leaf_shared(Arc::clone(&base), false)?;
        let diff = tape.sub(pred, b)?;
        let diff = tape.abs(diff)?;
        let change = tape.sum_all(diff)?;
        let total = tape.value(change).get(0, 0);
        let mvar = fwd.mask.expect("mask placed");
        let grads = fwd.tape.backward(change).map_err(|e| diverged(e, epoch))?;
        let g = grads.wrt(mvar);
        history.push(total);
        for (m, &gm) in mask.iter_mut().zip(g.data()) {
            let v = *m - cfg.lr * (reg_grad - gm);
            if !v.is_finite() {
                return Err(Error::Diverged { epoch, loss: v });
            }
            *m = v.clamp(0.0, 1.0);
        }
        if let Some(v) = &validation {
            let r = v.pearson(&score_of(&mask));
            if r > best.1 {
                best = (epoch + 1, r, mask.clone());
            }
        }
    }
    let (best_epoch, val_pearson, mask) = if validation.is_some() && best.1.is_finite() {
        best
    } else {
        (cfg.epochs, f64::NAN, mask)
    };
    let health = MaskHealth::of(&mask);
    if health != MaskHealth::Ok {
        log::warn!("mask optimization ended {health:?}; scores are constant");
    }
    Ok(MaskRun {
        config: cfg.clone(),
        scores: score_of(&mask),
        mask,
        best_epoch,
        val_pearson,
        change_history: history,
        health,
    })
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged {
            epoch,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Runs every grid point and keeps the one with the best validation
/// Pearson. Degenerate masks never win over a healthy one.
pub fn tune_mask(
    model: &GnnModel,
    graph: &Graph,
    grid: &[MaskConfig],
    eval_edges: Option<&[(usize, usize)]>,
    validation: Validation<'_>,
) -> Result<MaskRun> {
    if grid.is_empty() {
        return Err(Error::invalid("empty mask grid"));
    }
    let mut best: Option<MaskRun> = None;
    for cfg in grid {
        let run = optimize_mask(model, graph, cfg, eval_edges, Some(validation))?;
        let key = |r: &MaskRun| (r.health == MaskHealth::Ok, r.val_pearson.is_finite(), r.val_pearson);
        let better = match &best {
            None => true,
            Some(b) => {
                let (k, kb) = (key(&run), key(b));
                (k.0, k.1) > (kb.0, kb.1) || ((k.0, k.1) == (kb.0, kb.1) && k.2 > kb.2)
            }
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("grid is nonempty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictKind {
    /// Regress node influence directly.
    Node,
    /// Predict source and target embeddings `p`, `t`; the score of `r` is
    /// `p_r · Σ_{i∈N(r)} t_i`.
    Edge,
}

impl std::str::FromStr for PredictKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" | "node" | "predict-n" => Ok(PredictKind::Node),
            "e" | "edge" | "predict-e" => Ok(PredictKind::Edge),
            other => Err(Error::invalid(format!("unknown predictor {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictConfig {
    pub hidden: usize,
    /// Step size. The edge predictor divides it by the mean degree, since
    /// its neighbor sum scales gradients by about that much.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            hidden: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRun {
    pub kind: PredictKind,
    pub scores: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Training MSE per epoch, before the step.
    pub train_loss: Vec<f64>,
}

struct Regressor {
    model: GnnModel,
    kind: PredictKind,
    prop: Propagation,
    /// Plain neighbor sum for the edge predictor.
    neighbor_plan: Arc<AggPlan>,
    ones: Arc<Tensor>,
}

impl Regressor {
    fn new(graph: &Graph, kind: PredictKind, cfg: &PredictConfig) -> Result<Regressor> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let out = match kind {
            PredictKind::Node => 1,
            PredictKind::Edge => 2,
        };
        let layers = vec![
            GnnLayer::init(LayerKind::Gcn, graph.num_features(), cfg.hidden, Activation::Relu, &mut rng),
            GnnLayer::init(LayerKind::Gcn, cfg.hidden, out, Activation::None, &mut rng),
        ];
        let model = GnnModel::from_layers(LayerKind::Gcn, Task::NodeClassification, layers, Head::Identity)?;
        let neighbor_plan = Arc::new(AggPlan::build(graph, false));
        let ones = Arc::new(Tensor::filled(neighbor_plan.num_slots(), 1, 1.0));
        Ok(Regressor {
            model,
            kind,
            prop: Propagation::new(graph),
            neighbor_plan,
            ones,
        })
    }

    /// Forward returning the tape and the N×1 prediction.
    fn forward(&self, graph: &Graph, grad: bool) -> Result<(crate::gnn::Forward, Var)> {
        let opts = ForwardOptions {
            params_require_grad: grad,
            ..Default::default()
        };
        let mut fwd = forward_with(&self.model, graph, &self.prop, &opts)?;
        let out = fwd.logits;
        let pred = match self.kind {
            PredictKind::Node => out,
            PredictKind::Edge => edge_score(&mut fwd.tape, out, &self.neighbor_plan, &self.ones)?,
        };
        Ok((fwd, pred))
    }
}

fn edge_score(tape: &mut Tape, out: Var, plan: &Arc<AggPlan>, ones: &Arc<Tensor>) -> Result<Var> {
    let p = tape.slice_cols(out, 0, 1)?;
    let t = tape.slice_cols(out, 1, 2)?;
    let c = tape.leaf_shared(Arc::clone(ones), false)?;
    let t_sum = tape.aggregate(plan, t, c)?;
    tape.mul(p, t_sum)
}

/// Trains a two-layer GCN regressor with MSE on standardized labels and
/// keeps the epoch with the lowest validation MSE. Scores are mapped back
/// to the label scale.
pub fn predict_scores(
    graph: &Graph,
    kind: PredictKind,
    train: Validation<'_>,
    valid: Validation<'_>,
    cfg: &PredictConfig,
) -> Result<PredictRun> {
    let n = graph.num_nodes();
    train.check(n).map_err(|_| {
        Error::invalid(format!(
            "prediction baseline needs at least 3 valid training labels, got {}",
            train.ids.len()
        ))
    })?;
    if valid.ids.len() != valid.values.len() {
        return Err(Error::invalid("validation ids and values differ in length"));
    }
    if cfg.hidden == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("prediction baseline needs positive hidden, epochs and lr"));
    }
    let k = train.values.len() as f64;
    let mean = train.values.iter().sum::<f64>() / k;
    let sd = (train.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k).sqrt();
    if sd == 0.0 {
        log::warn!("training labels are constant; the predictor is that constant");
        return Ok(PredictRun {
            kind,
            scores: vec![mean; n],
            best_epoch: 0,
            best_val_loss: mse_of(&Tensor::filled(n, 1, 0.0), valid.ids, &vec![0.0; valid.ids.len()]),
            train_loss: Vec::new(),
        });
    }
    let standardize = |v: &[f64]| Arc::new(v.iter().map(|x| (x - mean) / sd).collect::<Vec<f64>>());
    let (train_rows, train_y) = (Arc::new(train.ids.to_vec()), standardize(train.values));
    let valid_rows = if valid.ids.is_empty() {
        Arc::clone(&train_rows)
    } else {
        Arc::new(valid.ids.to_vec())
    };
    let valid_y = if valid.ids.is_empty() {
        Arc::clone(&train_y)
    } else {
        standardize(valid.values)
    };
    let mut reg = Regressor::new(graph, kind, cfg)?;
    let lr = match kind {
        PredictKind::Node => cfg.lr,
        PredictKind::Edge => cfg.lr / graph.mean_degree().max(1.0),
    };
    let opt = TrainConfig {
        lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        epochs: cfg.epochs,
        seed: cfg.seed,
    };
    let mut velocity: Vec<Tensor> = reg
        .model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.rows(), p.cols()))
        .collect();
    let mut best = (0, f64::INFINITY, reg.model.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut fwd, pred) = reg.forward(graph, true).map_err(|e| diverged(e, epoch))?;
        let val_loss = mse_of(fwd.tape.value(pred), &valid_rows, &valid_y);
        if val_loss < best.1 {
            best = (epoch, val_loss, reg.model.clone());
        }
        let loss = fwd
            .tape
            .mse(pred, &train_rows, &train_y)
            .map_err(|e| diverged(e, epoch))?;
        history.push(fwd.tape.value(loss).get(0, 0));
        let mut grads = fwd.tape.backward(loss).map_err(|e| diverged(e, epoch))?;
        let g: Vec<Tensor> = fwd.params.iter().map(|&p| grads.take(p)).collect();
        step(&mut reg.model, g, &mut velocity, &opt);
    }
    let (best_epoch, best_val_loss, model) = best;
    reg.model = model;
    let (fwd, pred) = reg.forward(graph, false)?;
    let scores = fwd.tape.value(pred).data().iter().map(|z| z * sd + mean).collect();
    Ok(PredictRun {
        kind,
        scores,
        best_epoch,
        best_val_loss,
        train_loss: history,
    })
}

fn mse_of(pred: &Tensor, rows: &[usize], y: &[f64]) -> f64 {
    rows.iter()
        .zip(y)
        .map(|(&r, &t)| (pred.get(r, 0) - t).powi(2))
        .sum::<f64>()
        / rows.len().max(1) as f64
}
