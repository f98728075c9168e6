//! Influence of every node from one forward and one backward pass.
//!
//! The backward pass differentiates `s = ½‖f‖²`, where `f` is the column
//! sum of the model output (node task) or the summed probability of the
//! evaluation pairs (link task). Its gradient `G⁽ⁱ⁾ = ∂s/∂H⁽ⁱ⁾` equals
//! `f · ∂f/∂H⁽ⁱ⁾`, so a single scalar backward yields the per-class
//! weighted sensitivities for all layers at once.
//!
//! Per node `r` and layer `i`:
//!
//! ```text
//! ĥ_r⁽ⁱ⁾ = d_r / (d_r + β) · ‖G⁽ⁱ⁾_r ∘ H⁽ⁱ⁾_r‖_p
//! d̂_r   = 1 − d_r / ((N − 1)(d̄ + β))
//! T1_r   = Σ_{i<L} d̂_r^(L−1−i) · ĥ_r⁽ⁱ⁾
//! ```
//!
//! and a purely structural term estimating how much the aggregation
//! weights around `r` shift when it disappears:
//!
//! ```text
//! δTopo_r = Σ_{i ∈ N(r)} Σ_{j ∈ N(i), j ≠ r} A(d_i) · B(d_j)
//! A(d) = k1 (1/√(d−1) − 1/√d) + (1 − k1)(1/(d−1) − 1/d)     (d − 1 clamped to ≥ 1)
//! B(d) = k2/√d + k2'/d + (1 − k2 − k2')
//! ```
//!
//! Both components are divided by their mean and combined as
//! `T1 + k3' · δTopo`.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::eval::pearson;
use crate::gnn::{forward_taped, Forward, ForwardOptions, GnnModel};
use crate::graph::{Graph, Task, Topology};
use crate::oracle::validate_edge_set;
use crate::scores::{InfluenceScores, Provenance};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoraMode {
    /// Embedding term plus weighted structural term.
    Full,
    /// Embedding term only (`k3' = 0`).
    T1,
    /// Structural term only (the `k3' → ∞` limit).
    T2,
}

impl std::str::FromStr for NoraMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(NoraMode::Full),
            "t1" => Ok(NoraMode::T1),
            "t2" => Ok(NoraMode::T2),
            other => Err(Error::invalid(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoraConfig {
    pub beta: f64,
    pub k1: f64,
    pub k2: f64,
    pub k2p: f64,
    pub k3p: f64,
    pub p_norm: f64,
    pub component_normalization: Normalization,
    /// Keep `j = r` in the inner structural sum.
    pub include_removed_in_topo: bool,
}

impl Default for NoraConfig {
    fn default() -> Self {
        NoraConfig {
            beta: 3.0,
            k1: 0.5,
            k2: 0.5,
            k2p: 0.0,
            k3p: 1.0,
            p_norm: 1.0,
            component_normalization: Normalization::Mean,
            include_removed_in_topo: false,
        }
    }
}

impl NoraConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} not in [0, 1]")))
            }
        };
        unit("k1", self.k1)?;
        unit("k2", self.k2)?;
        unit("k2p", self.k2p)?;
        if self.k2 + self.k2p > 1.0 + 1e-12 {
            return Err(Error::invalid(format!(
                "k2 + k2p = {} exceeds 1",
                self.k2 + self.k2p
            )));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid(format!("beta = {} must be >= 0", self.beta)));
        }
        if !(self.k3p >= 0.0) || !self.k3p.is_finite() {
            return Err(Error::invalid(format!("k3p = {} must be >= 0", self.k3p)));
        }
        if !(self.p_norm > 0.0) {
            return Err(Error::invalid(format!("p = {} must be > 0", self.p_norm)));
        }
        Ok(())
    }
}

/// The tuning grid: β × k1 × k2 × k2' (with k2 + k2' ≤ 1) × k3' × p.
pub fn default_grid() -> Vec<NoraConfig> {
    let mut out = Vec::new();
    for beta in [1.0, 2.0, 3.0, 5.0, 10.0, 20.0] {
        for k3p in [0.5, 1.0, 2.0, 5.0] {
            for k1 in [0.0, 0.25, 0.5, 0.75, 1.0] {
                for k2 in [0.0, 0.25, 0.5, 0.75, 1.0] {
                    for k2p in [0.0, 0.25, 0.5] {
                        if k2 + k2p > 1.0 {
                            continue;
                        }
                        for p_norm in [1.0, 2.0] {
                            out.push(NoraConfig {
                                beta,
                                k1,
                                k2,
                                k2p,
                                k3p,
                                p_norm,
                                ..NoraConfig::default()
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Checkpointed representations `H⁽⁰⁾..H⁽ᴸ⁻¹⁾` and the surrogate's
/// gradients with respect to them.
#[derive(Debug, Clone)]
pub struct GradField {
    pub hidden: Vec<Arc<Tensor>>,
    pub grads: Vec<Tensor>,
}

/// Adds `s = ½‖f‖²` to a forward tape.
pub fn surrogate_scalar(fwd: &mut Forward, task: Task) -> Result<Var> {
    let f = match task {
        Task::NodeClassification => {
            let out = *fwd.hidden.last().expect("at least one layer");
            fwd.tape.col_sum(out)?
        }
        Task::LinkPrediction => {
            let probs = fwd.edge_probs.ok_or(Error::EmptyEdgeSet)?;
            fwd.tape.sum_all(probs)?
        }
    };
    fwd.tape.half_squared_norm(f)
}

/// One forward with checkpoints and one backward of the surrogate.
/// `eval_edges` is the scored pair set for a link model.
pub fn grad_field<T: Topology + ?Sized>(
    model: &GnnModel,
    topo: &T,
    eval_edges: Option<&[(usize, usize)]>,
) -> Result<GradField> {
    let task = model.task();
    let edges = match task {
        Task::NodeClassification => None,
        Task::LinkPrediction => {
            let e = eval_edges.ok_or(Error::EmptyEdgeSet)?;
            validate_edge_set(topo.num_nodes(), e)?;
            Some(Arc::new(e.to_vec()))
        }
    };
    let opts = ForwardOptions {
        features_require_grad: true,
        edges,
        ..Default::default()
    };
    let mut fwd = forward_taped(model, topo, &opts)?;
    let s = surrogate_scalar(&mut fwd, task)?;
    let mut grads = fwd.tape.backward(s)?;
    let l = model.num_layers();
    Ok(GradField {
        hidden: fwd.hidden[..l].iter().map(|&v| fwd.tape.shared_value(v)).collect(),
        grads: fwd.hidden[..l].iter().map(|&v| grads.take(v)).collect(),
    })
}

fn row_norm(g: &[f64], h: &[f64], p: f64) -> f64 {
    if p == 1.0 {
        g.iter().zip(h).map(|(a, b)| (a * b).abs()).sum()
    } else if p == 2.0 {
        g.iter().zip(h).map(|(a, b)| (a * b) * (a * b)).sum::<f64>().sqrt()
    } else {
        g.iter()
            .zip(h)
            .map(|(a, b)| (a * b).abs().powf(p))
            .sum::<f64>()
            .powf(1.0 / p)
    }
}

/// `‖G_r ∘ H_r‖_p` for every row.
fn row_norms(h: &Tensor, g: &Tensor, p: f64) -> Vec<f64> {
    (0..h.rows()).map(|r| row_norm(g.row(r), h.row(r), p)).collect()
}

/// `ĥ_r = d_r/(d_r+β) · ‖G_r ∘ H_r‖_p` for every node.
pub fn embedding_term(h: &Tensor, g: &Tensor, degrees: &[usize], beta: f64, p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0) {
        return Err(Error::invalid(format!("p = {p} must be > 0")));
    }
    if h.shape() != g.shape() || h.rows() != degrees.len() {
        return Err(Error::Shape {
            op: "embedding_term",
            lhs: h.shape(),
            rhs: g.shape(),
        });
    }
    Ok(row_norms(h, g, p)
        .into_iter()
        .zip(degrees)
        .map(|(norm, &d)| degree_weight(d, beta) * norm)
        .collect())
}

fn degree_weight(d: usize, beta: f64) -> f64 {
    if d == 0 {
        0.0
    } else {
        d as f64 / (d as f64 + beta)
    }
}

/// `d̂_r = 1 − d_r / ((N−1)(d̄+β))`.
pub fn damping(degrees: &[usize], mean_degree: f64, beta: f64) -> Vec<f64> {
    let n = degrees.len();
    let denom = (n.saturating_sub(1)) as f64 * (mean_degree + beta);
    degrees
        .iter()
        .map(|&d| if denom > 0.0 { 1.0 - d as f64 / denom } else { 1.0 })
        .collect()
}

fn coef_a(d: usize, k1: f64) -> f64 {
    let d = d as f64;
    let dm = (d - 1.0).max(1.0);
    k1 * (1.0 / dm.sqrt() - 1.0 / d.sqrt()) + (1.0 - k1) * (1.0 / dm - 1.0 / d)
}

fn coef_b(d: usize, k2: f64, k2p: f64) -> f64 {
    let d = d as f64;
    k2 / d.sqrt() + k2p / d + (1.0 - k2 - k2p)
}

/// Structural term for every node, in O(M).
pub fn topo_delta(graph: &Graph, cfg: &NoraConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    Ok(topo_delta_unchecked(graph, cfg.k1, cfg.k2, cfg.k2p, cfg.include_removed_in_topo))
}

fn topo_delta_unchecked(graph: &Graph, k1: f64, k2: f64, k2p: f64, include_removed: bool) -> Vec<f64> {
    let n = graph.num_nodes();
    let deg = graph.degrees();
    let b: Vec<f64> = deg.iter().map(|&d| coef_b(d, k2, k2p)).collect();
    let a: Vec<f64> = deg.iter().map(|&d| if d == 0 { 0.0 } else { coef_a(d, k1) }).collect();
    let s: Vec<f64> = (0..n)
        .map(|i| graph.neighbor_slice(i).iter().map(|&j| b[j as usize]).sum())
        .collect();
    (0..n)
        .map(|r| {
            graph
                .neighbor_slice(r)
                .iter()
                .map(|&i| {
                    let i = i as usize;
                    let inner = if include_removed { s[i] } else { s[i] - b[r] };
                    a[i] * inner.max(0.0)
                })
                .sum()
        })
        .collect()
}

fn normalize(v: &[f64], how: Normalization) -> Vec<f64> {
    let scale = match how {
        Normalization::Mean => v.iter().sum::<f64>() / v.len().max(1) as f64,
        Normalization::Max => v.iter().copied().fold(0.0, f64::max),
    };
    if scale > 0.0 {
        v.iter().map(|x| x / scale).collect()
    } else {
        v.to_vec()
    }
}

/// Caches everything that does not depend on the hyperparameters, so a
/// grid search reuses one forward/backward pass.
pub struct NoraEngine<'g> {
    graph: &'g Graph,
    task: Task,
    fingerprint: String,
    field: GradField,
    mean_degree: f64,
    norms: HashMap<u64, Vec<Vec<f64>>>,
    topo: HashMap<[u64; 4], Vec<f64>>,
    setup_secs: f64,
}

impl<'g> NoraEngine<'g> {
    /// `graph` is the graph the model passes messages on.
    pub fn new(model: &GnnModel, graph: &'g Graph, eval_edges: Option<&[(usize, usize)]>) -> Result<Self> {
        let start = Instant::now();
        let field = grad_field(model, graph, eval_edges)?;
        Ok(NoraEngine {
            graph,
            task: model.task(),
            fingerprint: model.fingerprint(),
            field,
            mean_degree: graph.mean_degree(),
            norms: HashMap::new(),
            topo: HashMap::new(),
            setup_secs: start.elapsed().as_secs_f64(),
        })
    }

    pub fn field(&self) -> &GradField {
        &self.field
    }

    fn layer_norms(&mut self, p: f64) -> &Vec<Vec<f64>> {
        let field = &self.field;
        self.norms.entry(p.to_bits()).or_insert_with(|| {
            field
                .hidden
                .iter()
                .zip(&field.grads)
                .map(|(h, g)| row_norms(h, g, p))
                .collect()
        })
    }

    /// Embedding component `T1` (unnormalized).
    pub fn t1(&mut self, cfg: &NoraConfig) -> Vec<f64> {
        let degrees = self.graph.degrees();
        let dhat = damping(degrees, self.mean_degree, cfg.beta);
        let norms = self.layer_norms(cfg.p_norm).clone();
        let l = norms.len();
        (0..degrees.len())
            .map(|r| {
                let w = degree_weight(degrees[r], cfg.beta);
                (0..l)
                    .map(|i| dhat[r].powi((l - 1 - i) as i32) * w * norms[i][r])
                    .sum()
            })
            .collect()
    }

    /// Structural component `δTopo` (unnormalized).
    pub fn t2(&mut self, cfg: &NoraConfig) -> Vec<f64> {
        let key = [
            cfg.k1.to_bits(),
            cfg.k2.to_bits(),
            cfg.k2p.to_bits(),
            cfg.include_removed_in_topo as u64,
        ];
        let graph = self.graph;
        self.topo
            .entry(key)
            .or_insert_with(|| {
                topo_delta_unchecked(graph, cfg.k1, cfg.k2, cfg.k2p, cfg.include_removed_in_topo)
            })
            .clone()
    }

    pub fn scores(&mut self, cfg: &NoraConfig, mode: NoraMode) -> Result<Vec<f64>> {
        cfg.validate()?;
        let how = cfg.component_normalization;
        Ok(match mode {
            NoraMode::T1 => normalize(&self.t1(cfg), how),
            NoraMode::T2 => normalize(&self.t2(cfg), how),
            NoraMode::Full => {
                let a = normalize(&self.t1(cfg), how);
                let b = normalize(&self.t2(cfg), how);
                a.iter().zip(&b).map(|(x, y)| x + cfg.k3p * y).collect()
            }
        })
    }

    pub fn influence(&mut self, cfg: &NoraConfig, mode: NoraMode) -> Result<InfluenceScores> {
        let start = Instant::now();
        let scores = self.scores(cfg, mode)?;
        Ok(InfluenceScores {
            scores,
            provenance: Provenance::Nora,
            task: self.task,
            model_fingerprint: self.fingerprint.clone(),
            wall_time_secs: self.setup_secs + start.elapsed().as_secs_f64(),
        })
    }
}

/// All-node scores for one configuration.
pub fn nora_scores(
    model: &GnnModel,
    graph: &Graph,
    cfg: &NoraConfig,
    mode: NoraMode,
    eval_edges: Option<&[(usize, usize)]>,
) -> Result<InfluenceScores> {
    cfg.validate()?;
    NoraEngine::new(model, graph, eval_edges)?.influence(cfg, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub config: NoraConfig,
    pub pearson: f64,
    pub evaluated: usize,
}

/// Grid search maximizing Pearson correlation with oracle scores on
/// `subset`. Exact ties go to the smaller `(β, k3')`, then grid order.
pub fn tune_nora(
    engine: &mut NoraEngine<'_>,
    subset: &[usize],
    oracle_subset: &[f64],
    grid: &[NoraConfig],
    mode: NoraMode,
) -> Result<TuneResult> {
    if subset.len() < 3 {
        return Err(Error::invalid(format!(
            "tuning subset has {} nodes; at least 3 are needed",
            subset.len()
        )));
    }
    if subset.len() != oracle_subset.len() {
        return Err(Error::invalid("subset and oracle values differ in length"));
    }
    if grid.is_empty() {
        return Err(Error::invalid("empty tuning grid"));
    }
    let mut best: Option<TuneResult> = None;
    let mut evaluated = 0;
    for cfg in grid {
        let scores = engine.scores(cfg, mode)?;
        let picked: Vec<f64> = subset.iter().map(|&i| scores[i]).collect();
        let Ok(r) = pearson(&picked, oracle_subset) else {
            continue;
        };
        evaluated += 1;
        let better = match &best {
            None => true,
            Some(b) => {
                r > b.pearson
                    || (r == b.pearson
                        && (cfg.beta, cfg.k3p) < (b.config.beta, b.config.k3p))
            }
        };
        if better {
            best = Some(TuneResult {
                config: cfg.clone(),
                pearson: r,
                evaluated: 0,
            });
        }
    }
    let mut best = best.ok_or_else(|| {
        Error::UndefinedCorrelation("no grid configuration gives a defined correlation".into())
    })?;
    best.evaluated = evaluated;
    Ok(best)
}
