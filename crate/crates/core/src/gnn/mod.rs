//! Message-passing layers (GCN, GraphSAGE-mean, single-head GAT), task
//! heads and the full-model forward.
//!
//! Every layer computes
//!
//! ```text
//! h_i' = σ( (h_i W_s + Σ_{j ∈ N(i) ∪ {i}} α_ji h_j W_m) W_u + b )
//! ```
//!
//! in row-vector convention. `W_s` and `W_u` are optional (absent means
//! zero and identity). The coefficients `α` depend on the layer kind.

pub(crate) mod train;

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use train::{train, EpochStats, TrainConfig, TrainReport};

use crate::autodiff::{AggPlan, Tape, Var};
use crate::counters;
use crate::error::{Error, Result};
use crate::graph::{Task, Topology};
use crate::tensor::Tensor;

pub const GAT_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Gcn,
    #[serde(alias = "sage")]
    SageMean,
    #[serde(alias = "gat")]
    Gat1,
}

impl std::str::FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(LayerKind::Gcn),
            "sage" | "sage-mean" => Ok(LayerKind::SageMean),
            "gat" | "gat1" => Ok(LayerKind::Gat1),
            other => Err(Error::invalid(format!("unknown model kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LayerKind::Gcn => "gcn",
            LayerKind::SageMean => "sage-mean",
            LayerKind::Gat1 => "gat1",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// Row-wise softmax over class logits.
    Softmax,
    /// Final layer output used as is.
    Identity,
    /// Sigmoid of the dot product of two node embeddings.
    DotSigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnLayer {
    pub kind: LayerKind,
    pub activation: Activation,
    pub w_m: Arc<Tensor>,
    pub w_s: Option<Arc<Tensor>>,
    pub w_u: Option<Arc<Tensor>>,
    pub bias: Option<Arc<Tensor>>,
    /// GAT attention vectors (`d_out × 1`) for the source and target side.
    pub att_src: Option<Arc<Tensor>>,
    pub att_dst: Option<Arc<Tensor>>,
}

impl GnnLayer {
    pub fn in_dim(&self) -> usize {
        self.w_m.rows()
    }

    pub fn out_dim(&self) -> usize {
        match &self.w_u {
            Some(u) => u.cols(),
            None => self.w_m.cols(),
        }
    }

    fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Arc<Tensor> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let mut t = Tensor::zeros(rows, cols);
        for v in t.data_mut() {
            *v = rng.random_range(-limit..limit);
        }
        Arc::new(t)
    }

    /// Randomly initialized layer with the default parameterization of
    /// each kind: GCN and GAT carry only `W_m`, SAGE adds `W_s`.
    pub fn init(
        kind: LayerKind,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> GnnLayer {
        let w_m = Self::glorot(in_dim, out_dim, rng);
        let w_s = (kind == LayerKind::SageMean).then(|| Self::glorot(in_dim, out_dim, rng));
        let (att_src, att_dst) = if kind == LayerKind::Gat1 {
            (
                Some(Self::glorot(out_dim, 1, rng)),
                Some(Self::glorot(out_dim, 1, rng)),
            )
        } else {
            (None, None)
        };
        GnnLayer {
            kind,
            activation,
            w_m,
            w_s,
            w_u: None,
            bias: Some(Arc::new(Tensor::zeros(1, out_dim))),
            att_src,
            att_dst,
        }
    }

    fn validate(&self) -> Result<()> {
        let shape_err = |what: &Arc<Tensor>| Error::Shape {
            op: "layer",
            lhs: self.w_m.shape(),
            rhs: what.shape(),
        };
        if let Some(s) = &self.w_s {
            if s.shape() != self.w_m.shape() {
                return Err(shape_err(s));
            }
        }
        if let Some(u) = &self.w_u {
            if u.rows() != self.w_m.cols() {
                return Err(shape_err(u));
            }
        }
        if let Some(b) = &self.bias {
            if b.shape() != (1, self.out_dim()) {
                return Err(shape_err(b));
            }
        }
        if self.kind == LayerKind::Gat1 {
            for a in [&self.att_src, &self.att_dst] {
                match a {
                    Some(a) if a.shape() == (self.w_m.cols(), 1) => {}
                    Some(a) => return Err(shape_err(a)),
                    None => return Err(Error::invalid("gat layer without attention vectors")),
                }
            }
        }
        Ok(())
    }

    fn params(&self) -> Vec<&Arc<Tensor>> {
        let mut out = vec![&self.w_m];
        for p in [&self.w_s, &self.w_u, &self.bias, &self.att_src, &self.att_dst]
            .into_iter()
            .flatten()
        {
            out.push(p);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut out = vec![&mut self.w_m];
        for p in [
            &mut self.w_s,
            &mut self.w_u,
            &mut self.bias,
            &mut self.att_src,
            &mut self.att_dst,
        ]
        .into_iter()
        .flatten()
        {
            out.push(p);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: LayerKind,
    pub task: Task,
    pub in_dim: usize,
    pub hidden: usize,
    /// Class count for node classification, embedding width for links.
    pub out_dim: usize,
    pub num_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnModel {
    pub config: ModelConfig,
    pub layers: Vec<GnnLayer>,
    pub head: Head,
}

impl GnnModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<GnnModel> {
        if config.num_layers == 0 {
            return Err(Error::invalid("a model needs at least one layer"));
        }
        if config.in_dim == 0 || config.hidden == 0 || config.out_dim == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = config.num_layers;
        let layers = (0..l)
            .map(|i| {
                let d_in = if i == 0 { config.in_dim } else { config.hidden };
                let (d_out, act) = if i + 1 == l {
                    (config.out_dim, Activation::None)
                } else {
                    (config.hidden, Activation::Relu)
                };
                GnnLayer::init(config.kind, d_in, d_out, act, &mut rng)
            })
            .collect();
        let head = match config.task {
            Task::NodeClassification => Head::Softmax,
            Task::LinkPrediction => Head::DotSigmoid,
        };
        Ok(GnnModel {
            config,
            layers,
            head,
        })
    }

    /// Model built from explicit layers.
    pub fn from_layers(kind: LayerKind, task: Task, layers: Vec<GnnLayer>, head: Head) -> Result<GnnModel> {
        let first = layers.first().ok_or_else(|| Error::invalid("no layers"))?;
        let config = ModelConfig {
            kind,
            task,
            in_dim: first.in_dim(),
            hidden: first.out_dim(),
            out_dim: layers.last().map_or(0, GnnLayer::out_dim),
            num_layers: layers.len(),
        };
        let model = GnnModel {
            config,
            layers,
            head,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if i > 0 && layer.in_dim() != self.layers[i - 1].out_dim() {
                return Err(Error::Shape {
                    op: "model",
                    lhs: (0, self.layers[i - 1].out_dim()),
                    rhs: (layer.in_dim(), 0),
                });
            }
        }
        let head_ok = match self.config.task {
            Task::NodeClassification => self.head != Head::DotSigmoid,
            Task::LinkPrediction => self.head == Head::DotSigmoid,
        };
        if !head_ok {
            return Err(Error::invalid(format!(
                "head {:?} does not fit task {}",
                self.head, self.config.task
            )));
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Arc<Tensor>> {
        self.layers.iter().flat_map(GnnLayer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        self.layers.iter_mut().flat_map(GnnLayer::params_mut).collect()
    }

    /// Hex SHA-256 of the serialized model.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("model serializes");
        hex(&Sha256::digest(json))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self)?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<GnnModel> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: GnnModel = serde_json::from_str(&body)
            .map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        model.validate()?;
        Ok(model)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Aggregation plan plus the fixed GCN and SAGE coefficients for one
/// topology.
pub struct Propagation {
    pub plan: Arc<AggPlan>,
    gcn: Arc<Tensor>,
    sage: Arc<Tensor>,
}

impl Propagation {
    pub fn new<T: Topology + ?Sized>(topo: &T) -> Propagation {
        let plan = AggPlan::build(topo, true);
        let n = topo.num_nodes();
        let deg: Vec<f64> = (0..n).map(|i| topo.degree(i) as f64 + 1.0).collect();
        let mut gcn = Vec::with_capacity(plan.num_slots());
        let mut sage = Vec::with_capacity(plan.num_slots());
        for (i, &di) in deg.iter().enumerate() {
            for s in plan.segment(i) {
                let dj = deg[plan.source(s)];
                gcn.push(1.0 / (di * dj).sqrt());
                sage.push(1.0 / di);
            }
        }
        Propagation {
            plan: Arc::new(plan),
            gcn: Arc::new(Tensor::column(gcn)),
            sage: Arc::new(Tensor::column(sage)),
        }
    }

    /// Fixed coefficient column for a kind with structure-only weights.
    pub fn coefficients(&self, kind: LayerKind) -> Option<&Arc<Tensor>> {
        match kind {
            LayerKind::Gcn => Some(&self.gcn),
            LayerKind::SageMean => Some(&self.sage),
            LayerKind::Gat1 => None,
        }
    }
}

/// Layer parameters placed on a tape.
pub struct LayerVars {
    pub w_m: Var,
    pub w_s: Option<Var>,
    pub w_u: Option<Var>,
    pub bias: Option<Var>,
    pub att_src: Option<Var>,
    pub att_dst: Option<Var>,
}

impl LayerVars {
    pub fn place(tape: &mut Tape, layer: &GnnLayer, requires_grad: bool) -> Result<LayerVars> {
        let mut put = |t: &Option<Arc<Tensor>>| -> Result<Option<Var>> {
            t.as_ref()
                .map(|t| tape.leaf_shared(Arc::clone(t), requires_grad))
                .transpose()
        };
        let w_s = put(&layer.w_s)?;
        let w_u = put(&layer.w_u)?;
        let bias = put(&layer.bias)?;
        let att_src = put(&layer.att_src)?;
        let att_dst = put(&layer.att_dst)?;
        let w_m = tape.leaf_shared(Arc::clone(&layer.w_m), requires_grad)?;
        Ok(LayerVars {
            w_m,
            w_s,
            w_u,
            bias,
            att_src,
            att_dst,
        })
    }

    /// Same order as [`GnnModel::params`].
    fn in_order(&self) -> Vec<Var> {
        let mut out = vec![self.w_m];
        out.extend(
            [self.w_s, self.w_u, self.bias, self.att_src, self.att_dst]
                .into_iter()
                .flatten(),
        );
        out
    }
}

/// One layer on a tape. `mask` (N×1) scales the rows of the input
/// representation before message passing.
pub fn layer_forward(
    tape: &mut Tape,
    layer: &GnnLayer,
    vars: &LayerVars,
    prop: &Propagation,
    h: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let (rows, cols) = tape.value(h).shape();
    if rows != prop.plan.num_nodes() || cols != layer.in_dim() {
        return Err(Error::Shape {
            op: "layer_forward",
            lhs: (rows, cols),
            rhs: (prop.plan.num_nodes(), layer.in_dim()),
        });
    }
    // Row scaling commutes with the right-multiplications, so masking
    // the transformed rows equals masking the input rows.
    let mut msg = tape.matmul(h, vars.w_m)?;
    if let Some(m) = mask {
        msg = tape.row_scale(msg, m)?;
    }
    let coeffs = match prop.coefficients(layer.kind) {
        Some(c) => tape.leaf_shared(Arc::clone(c), false)?,
        None => {
            let (a_src, a_dst) = match (vars.att_src, vars.att_dst) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::invalid("gat layer without attention vectors")),
            };
            let src = tape.matmul(msg, a_src)?;
            let dst = tape.matmul(msg, a_dst)?;
            let e = tape.edge_scores(&prop.plan, src, dst)?;
            let e = tape.leaky_relu(e, GAT_SLOPE)?;
            tape.segment_softmax(&prop.plan, e)?
        }
    };
    let mut z = tape.aggregate(&prop.plan, msg, coeffs)?;
    if let Some(w_s) = vars.w_s {
        let mut own = tape.matmul(h, w_s)?;
        if let Some(m) = mask {
            own = tape.row_scale(own, m)?;
        }
        z = tape.add(z, own)?;
    }
    if let Some(w_u) = vars.w_u {
        z = tape.matmul(z, w_u)?;
    }
    if let Some(b) = vars.bias {
        z = tape.add_row(z, b)?;
    }
    match layer.activation {
        Activation::Relu => tape.relu(z),
        Activation::None => Ok(z),
    }
}

#[derive(Default, Clone)]
pub struct ForwardOptions {
    pub params_require_grad: bool,
    pub features_require_grad: bool,
    /// Row mask (N×1) applied to every layer's input.
    pub mask: Option<Arc<Tensor>>,
    pub mask_requires_grad: bool,
    /// Node pairs to score (link task).
    pub edges: Option<Arc<Vec<(usize, usize)>>>,
}

/// A forward pass kept on its tape.
pub struct Forward {
    pub tape: Tape,
    /// `H⁽⁰⁾..H⁽ᴸ⁾`. `H⁽ᴸ⁾` is the head output for node tasks (class
    /// probabilities under the softmax head) and the final embeddings for
    /// link tasks. Registered as tape checkpoints in this order.
    pub hidden: Vec<Var>,
    /// Last layer output before the head.
    pub logits: Var,
    pub edge_logits: Option<Var>,
    pub edge_probs: Option<Var>,
    /// Parameter leaves in [`GnnModel::params`] order (empty unless
    /// `params_require_grad`).
    pub params: Vec<Var>,
    pub mask: Option<Var>,
}

pub fn forward_taped<T: Topology + ?Sized>(
    model: &GnnModel,
    topo: &T,
    opts: &ForwardOptions,
) -> Result<Forward> {
    let prop = Propagation::new(topo);
    forward_with(model, topo, &prop, opts)
}

/// Forward pass with a precomputed [`Propagation`] for `topo`.
pub fn forward_with<T: Topology + ?Sized>(
    model: &GnnModel,
    topo: &T,
    prop: &Propagation,
    opts: &ForwardOptions,
) -> Result<Forward> {
    let features = topo.features();
    if features.cols() != model.config.in_dim {
        return Err(Error::Shape {
            op: "model_forward",
            lhs: features.shape(),
            rhs: (topo.num_nodes(), model.config.in_dim),
        });
    }
    counters::record_forward();
    let mut tape = Tape::new();
    let h0 = tape.leaf_shared(Arc::clone(features), opts.features_require_grad)?;
    let mask = opts
        .mask
        .as_ref()
        .map(|m| tape.leaf_shared(Arc::clone(m), opts.mask_requires_grad))
        .transpose()?;
    let mut hidden = vec![h0];
    let mut params = Vec::new();
    let mut h = h0;
    for layer in &model.layers {
        let vars = LayerVars::place(&mut tape, layer, opts.params_require_grad)?;
        if opts.params_require_grad {
            params.extend(vars.in_order());
        }
        h = layer_forward(&mut tape, layer, &vars, prop, h, mask)?;
        hidden.push(h);
    }
    let logits = h;
    let (mut edge_logits, mut edge_probs) = (None, None);
    match model.head {
        Head::Softmax => {
            let p = tape.softmax_rows(logits)?;
            *hidden.last_mut().expect("at least one layer") = p;
        }
        Head::Identity => {}
        Head::DotSigmoid => {
            if let Some(edges) = &opts.edges {
                let z = tape.row_dot(logits, edges)?;
                edge_logits = Some(z);
                edge_probs = Some(tape.sigmoid(z)?);
            }
        }
    }
    for &v in &hidden {
        tape.checkpoint(v);
    }
    Ok(Forward {
        tape,
        hidden,
        logits,
        edge_logits,
        edge_probs,
        params,
        mask,
    })
}

/// Output of an inference-only forward.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `H⁽⁰⁾..H⁽ᴸ⁾` as defined on [`Forward::hidden`].
    pub checkpoints: Vec<Arc<Tensor>>,
    /// Probability for each queried pair (link task).
    pub edge_probs: Option<Vec<f64>>,
}

impl Prediction {
    /// `H⁽ᴸ⁾`: class probabilities (node task) or embeddings (link task).
    pub fn output(&self) -> &Tensor {
        self.checkpoints.last().expect("at least one layer")
    }
}

/// Inference forward. `edges` are the pairs to score for a link model.
pub fn model_forward<T: Topology + ?Sized>(
    model: &GnnModel,
    topo: &T,
    edges: Option<&Arc<Vec<(usize, usize)>>>,
) -> Result<Prediction> {
    let opts = ForwardOptions {
        edges: edges.cloned(),
        ..Default::default()
    };
    let fwd = forward_taped(model, topo, &opts)?;
    Ok(Prediction {
        checkpoints: fwd.hidden.iter().map(|&v| fwd.tape.shared_value(v)).collect(),
        edge_probs: fwd.edge_probs.map(|v| fwd.tape.value(v).data().to_vec()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_synthetic, remove_node, Graph, SynthKind, SynthParams};

    fn cfg(kind: LayerKind, task: Task, in_dim: usize) -> ModelConfig {
        ModelConfig {
            kind,
            task,
            in_dim,
            hidden: 8,
            out_dim: 3,
            num_layers: 2,
        }
    }

    fn ba(n: usize, seed: u64) -> Graph {
        let mut p = SynthParams::new(n);
        p.m = 2;
        p.num_classes = 3;
        generate_synthetic(SynthKind::BarabasiAlbert, &p, seed).unwrap()
    }

    const KINDS: [LayerKind; 3] = [LayerKind::Gcn, LayerKind::SageMean, LayerKind::Gat1];

    #[test]
    fn node_outputs_are_row_stochastic() {
        let g = ba(40, 1);
        for kind in KINDS {
            let model = GnnModel::new(cfg(kind, Task::NodeClassification, 8), 5).unwrap();
            let pred = model_forward(&model, &g, None).unwrap();
            let out = pred.output();
            assert_eq!(out.shape(), (40, 3));
            for r in 0..40 {
                let s: f64 = out.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
            assert_eq!(pred.checkpoints.len(), 3);
            assert_eq!(&*pred.checkpoints[0], &**g.features());
        }
    }

    #[test]
    fn link_probability_of_identical_unit_embeddings() {
        let (g, _) = Graph::from_edges(1, &[], Tensor::from_vec(1, 2, vec![0.6, 0.8]).unwrap(), None).unwrap();
        let layer = GnnLayer {
            kind: LayerKind::Gcn,
            activation: Activation::None,
            w_m: Arc::new(Tensor::identity(2)),
            w_s: None,
            w_u: None,
            bias: None,
            att_src: None,
            att_dst: None,
        };
        let model = GnnModel::from_layers(LayerKind::Gcn, Task::LinkPrediction, vec![layer], Head::DotSigmoid).unwrap();
        let pred = model_forward(&model, &g, Some(&Arc::new(vec![(0, 0)]))).unwrap();
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((pred.edge_probs.unwrap()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn gcn_isolated_node_uses_unit_self_coefficient() {
        let (g, _) = Graph::from_edges(1, &[], Tensor::from_vec(1, 1, vec![2.0]).unwrap(), None).unwrap();
        let layer = GnnLayer {
            kind: LayerKind::Gcn,
            activation: Activation::None,
            w_m: Arc::new(Tensor::scalar(3.0)),
            w_s: Some(Arc::new(Tensor::scalar(5.0))),
            w_u: Some(Arc::new(Tensor::scalar(0.5))),
            bias: None,
            att_src: None,
            att_dst: None,
        };
        let model = GnnModel::from_layers(LayerKind::Gcn, Task::NodeClassification, vec![layer], Head::Identity).unwrap();
        let out = model_forward(&model, &g, None).unwrap();
        assert_eq!(out.output().data(), &[0.5 * (5.0 * 2.0 + 3.0 * 2.0)]);
    }

    #[test]
    fn sage_coefficients_are_uniform_over_closed_neighborhood() {
        let g = generate_synthetic(SynthKind::Star, &SynthParams::new(4), 0).unwrap();
        let prop = Propagation::new(&g);
        let c = prop.coefficients(LayerKind::SageMean).unwrap();
        for s in prop.plan.segment(0) {
            assert_eq!(c.data()[s], 0.25);
        }
    }

    #[test]
    fn gat_attention_rows_sum_to_one() {
        let g = ba(30, 2);
        let model = GnnModel::new(cfg(LayerKind::Gat1, Task::NodeClassification, 8), 3).unwrap();
        let prop = Propagation::new(&g);
        let mut tape = Tape::new();
        let h = tape.leaf_shared(Arc::clone(g.features()), false).unwrap();
        let layer = &model.layers[0];
        let vars = LayerVars::place(&mut tape, layer, false).unwrap();
        let msg = tape.matmul(h, vars.w_m).unwrap();
        let src = tape.matmul(msg, vars.att_src.unwrap()).unwrap();
        let dst = tape.matmul(msg, vars.att_dst.unwrap()).unwrap();
        let e = tape.edge_scores(&prop.plan, src, dst).unwrap();
        let a = tape.segment_softmax(&prop.plan, e).unwrap();
        for i in 0..30 {
            let s: f64 = prop.plan.segment(i).map(|s| tape.value(a).data()[s]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_width_mismatch_is_rejected() {
        let g = ba(10, 0);
        let model = GnnModel::new(cfg(LayerKind::Gcn, Task::NodeClassification, 5), 0).unwrap();
        assert!(matches!(model_forward(&model, &g, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn removal_leaves_distant_predictions_unchanged() {
        // GCN coefficients depend on both endpoint degrees, so a removal
        // reaches one hop further than the message-passing depth.
        for (kind, safe) in [(LayerKind::Gcn, 4), (LayerKind::SageMean, 3), (LayerKind::Gat1, 3)] {
            let mut p = SynthParams::new(60);
            p.p = 0.05;
            let g = generate_synthetic(SynthKind::ErdosRenyi, &p, 11).unwrap();
            let model = GnnModel::new(cfg(kind, Task::NodeClassification, 8), 1).unwrap();
            let base = model_forward(&model, &g, None).unwrap();
            let mut checked = 0;
            for r in [0, 7, 23] {
                let view = remove_node(&g, r).unwrap();
                let after = model_forward(&model, &view, None).unwrap();
                let dist = g.hop_distances(r);
                for i in 0..60 {
                    if dist[i] >= safe {
                        assert_eq!(base.output().row(i), after.output().row(i), "{kind} node {i}");
                        checked += 1;
                    }
                }
            }
            assert!(checked > 0);
        }
    }

    #[test]
    fn gcn_removal_can_reach_three_hops() {
        // Path 0-1-2-3-4: removing node 0 changes d_1, which changes the
        // coefficient node 2 gives to node 1, which node 3 then receives.
        let n = 5;
        let feats = Tensor::from_vec(n, 1, (0..n).map(|i| i as f64 + 1.0).collect()).unwrap();
        let (g, _) = Graph::from_edges(n, &[(0, 1), (1, 2), (2, 3), (3, 4)], feats, None).unwrap();
        let lin = |kind| GnnLayer {
            kind,
            activation: Activation::None,
            w_m: Arc::new(Tensor::scalar(1.0)),
            w_s: None,
            w_u: None,
            bias: None,
            att_src: None,
            att_dst: None,
        };
        let model = GnnModel::from_layers(
            LayerKind::Gcn,
            Task::NodeClassification,
            vec![lin(LayerKind::Gcn), lin(LayerKind::Gcn)],
            Head::Identity,
        )
        .unwrap();
        let base = model_forward(&model, &g, None).unwrap();
        let view = remove_node(&g, 0).unwrap();
        let after = model_forward(&model, &view, None).unwrap();
        assert_ne!(base.output().row(3), after.output().row(3));
        assert_eq!(base.output().row(4), after.output().row(4));
    }

    #[test]
    fn permutation_equivariance() {
        let g = ba(25, 4);
        let mut perm: Vec<usize> = (0..25).collect();
        perm.reverse();
        perm.swap(3, 17);
        let pg = g.permuted(&perm).unwrap();
        for kind in KINDS {
            let model = GnnModel::new(cfg(kind, Task::NodeClassification, 8), 9).unwrap();
            let a = model_forward(&model, &g, None).unwrap();
            let b = model_forward(&model, &pg, None).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                for (x, y) in a.output().row(i).iter().zip(b.output().row(p)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_gcn_jacobian_matches_closed_form() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = ba(12, 6);
        let d = 4;
        let rand_mat = |rng: &mut ChaCha8Rng, r, c| {
            let mut t = Tensor::zeros(r, c);
            for v in t.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            Arc::new(t)
        };
        let layer = GnnLayer {
            kind: LayerKind::Gcn,
            activation: Activation::None,
            w_m: rand_mat(&mut rng, d, d),
            w_s: Some(rand_mat(&mut rng, d, d)),
            w_u: Some(rand_mat(&mut rng, d, 3)),
            bias: Some(rand_mat(&mut rng, 1, 3)),
            att_src: None,
            att_dst: None,
        };
        let prop = Propagation::new(&g);
        let h_in = rand_mat(&mut rng, 12, d);
        for r in [0usize, 5, 11] {
            let a_rr = 1.0 / (g.degree(r) as f64 + 1.0);
            let mut closed = (*layer.w_m).clone();
            for (c, &s) in closed.data_mut().iter_mut().zip(layer.w_s.as_ref().unwrap().data()) {
                *c = s + a_rr * *c;
            }
            let closed = closed.matmul(layer.w_u.as_ref().unwrap()).unwrap();
            // row-vector form: ∂h_r'[k]/∂h_r[j] = closed[j][k]
            for k in 0..3 {
                let mut tape = Tape::new();
                let h = tape.leaf_shared(Arc::clone(&h_in), true).unwrap();
                let vars = LayerVars::place(&mut tape, &layer, false).unwrap();
                let out = layer_forward(&mut tape, &layer, &vars, &prop, h, None).unwrap();
                let col = tape.slice_cols(out, k, k + 1).unwrap();
                let pick = tape.select_rows(col, &Arc::new(vec![r])).unwrap();
                let s = tape.sum_all(pick).unwrap();
                let grads = tape.backward(s).unwrap();
                let gh = grads.wrt(h);
                for j in 0..d {
                    assert!((gh.get(r, j) - closed.get(j, k)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = GnnModel::new(cfg(LayerKind::Gat1, Task::LinkPrediction, 8), 2).unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        let back = GnnModel::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.fingerprint(), model.fingerprint());
    }
}
