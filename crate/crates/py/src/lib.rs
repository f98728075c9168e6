//! Python bindings: graphs, model training, the brute-force oracle, NORA
//! and the correlation metrics.

use std::collections::HashMap;
use std::path::PathBuf;

use nie_core::eval;
use nie_core::gnn::{model_forward, train, GnnModel, LayerKind, ModelConfig, TrainConfig};
use nie_core::nora::{default_grid, tune_nora, NoraConfig, NoraEngine, NoraMode};
use nie_core::oracle::{oracle_link, oracle_node, OracleOptions};
use nie_core::{
    cycle_split, generate_synthetic, load_dataset, Error, Graph, SplitSpec, SynthKind, SynthParams,
    Task, Topology,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(nie, NieError, PyException);

fn to_py(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        NieError::new_err(e.to_string())
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

#[pyclass(name = "Graph", module = "nie", frozen)]
pub struct PyGraph {
    inner: Graph,
}

#[pymethods]
impl PyGraph {
    /// Loads a dataset directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_dataset(&path).map_err(to_py)?;
        Ok(PyGraph { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (kind, n, p=0.0, m=1, features=8, classes=2, seed=0))]
    fn synthetic(kind: &str, n: usize, p: f64, m: usize, features: usize, classes: usize, seed: u64) -> PyResult<Self> {
        let mut params = SynthParams::new(n);
        params.p = p;
        params.m = m;
        params.num_features = features;
        params.num_classes = classes;
        let inner = generate_synthetic(parse::<SynthKind>(kind)?, &params, seed).map_err(to_py)?;
        Ok(PyGraph { inner })
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.num_edges()
    }

    #[getter]
    fn num_features(&self) -> usize {
        self.inner.num_features()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn degrees(&self) -> Vec<usize> {
        self.inner.degrees().to_vec()
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges()
    }

    fn __repr__(&self) -> String {
        format!("Graph(num_nodes={}, num_edges={})", self.inner.num_nodes(), self.inner.num_edges())
    }
}

#[pyclass(name = "Model", module = "nie", frozen)]
pub struct PyModel {
    inner: GnnModel,
    /// Accuracy (node task) or ROC-AUC (link task) on the test split.
    #[pyo3(get)]
    test_metric: Option<f64>,
}

#[pymethods]
impl PyModel {
    /// Trains a new model on split `cycle` of the graph.
    #[staticmethod]
    #[pyo3(signature = (graph, task="node", kind="gcn", hidden=64, layers=2, epochs=200, lr=0.2, seed=0, cycle=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        graph: &PyGraph,
        task: &str,
        kind: &str,
        hidden: usize,
        layers: usize,
        epochs: usize,
        lr: f64,
        seed: u64,
        cycle: usize,
    ) -> PyResult<Self> {
        let task: Task = parse(task)?;
        let kind: LayerKind = parse(kind)?;
        let g = &graph.inner;
        let out = py.detach(|| -> nie_core::Result<(GnnModel, f64)> {
            let split = cycle_split(&SplitSpec::new(g, task, seed)?, checked_cycle(cycle)?);
            let cfg = ModelConfig {
                kind,
                task,
                in_dim: g.num_features(),
                hidden,
                out_dim: match task {
                    Task::NodeClassification => g.num_classes(),
                    Task::LinkPrediction => hidden,
                },
                num_layers: layers,
            };
            let mut model = GnnModel::new(cfg, seed)?;
            let tc = TrainConfig {
                epochs,
                lr,
                seed,
                ..TrainConfig::default()
            };
            let report = train(&mut model, g, &split, &tc)?;
            Ok((model, report.test_metric))
        });
        let (inner, metric) = out.map_err(to_py)?;
        Ok(PyModel {
            inner,
            test_metric: Some(metric),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: GnnModel::load(&path).map_err(to_py)?,
            test_metric: None,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    #[getter]
    fn task(&self) -> String {
        self.inner.task().to_string()
    }

    /// Final-layer output per node: class probabilities or embeddings.
    fn predict(&self, graph: &PyGraph) -> PyResult<Vec<Vec<f64>>> {
        let p = model_forward(&self.inner, &graph.inner, None).map_err(to_py)?;
        let out = p.output();
        Ok((0..out.rows()).map(|r| out.row(r).to_vec()).collect())
    }
}

fn checked_cycle(cycle: usize) -> nie_core::Result<usize> {
    if cycle >= nie_core::graph::NUM_CYCLES {
        return Err(Error::InvalidParam(format!("cycle {cycle} out of range 0..5")));
    }
    Ok(cycle)
}

/// Message graph and link evaluation pairs for a model's task.
fn context(model: &GnnModel, graph: &Graph, seed: u64, cycle: usize) -> nie_core::Result<(Graph, Vec<(usize, usize)>)> {
    match model.task() {
        Task::NodeClassification => Ok((graph.clone(), Vec::new())),
        Task::LinkPrediction => {
            let split = cycle_split(&SplitSpec::new(graph, Task::LinkPrediction, seed)?, checked_cycle(cycle)?);
            Ok((split.message_graph(graph)?.into_owned(), split.eval_edges()))
        }
    }
}

/// Exact influence of every node.
#[pyfunction]
#[pyo3(signature = (model, graph, workers=1, seed=0, cycle=0))]
fn oracle(py: Python<'_>, model: &PyModel, graph: &PyGraph, workers: usize, seed: u64, cycle: usize) -> PyResult<Vec<f64>> {
    let (m, g) = (&model.inner, &graph.inner);
    py.detach(|| {
        let (mg, edges) = context(m, g, seed, cycle)?;
        let opts = OracleOptions {
            workers,
            ..OracleOptions::default()
        };
        let s = match m.task() {
            Task::NodeClassification => oracle_node(m, &mg, &opts)?,
            Task::LinkPrediction => oracle_link(m, &mg, &edges, &opts)?,
        };
        Ok(s.scores)
    })
    .map_err(to_py)
}

/// NORA scores for every node. With `labels` (node id to oracle score)
/// the settings are tuned on them; otherwise `config` (a JSON string) or
/// the defaults are used.
#[pyfunction]
#[pyo3(signature = (model, graph, labels=None, config=None, mode="full", seed=0, cycle=0))]
#[allow(clippy::too_many_arguments)]
fn nora(
    py: Python<'_>,
    model: &PyModel,
    graph: &PyGraph,
    labels: Option<HashMap<usize, f64>>,
    config: Option<&str>,
    mode: &str,
    seed: u64,
    cycle: usize,
) -> PyResult<(Vec<f64>, String)> {
    let mode: NoraMode = parse(mode)?;
    let fixed: Option<NoraConfig> = config
        .map(serde_json::from_str)
        .transpose()
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let (m, g) = (&model.inner, &graph.inner);
    py.detach(|| {
        let (mg, edges) = context(m, g, seed, cycle)?;
        let ee = (!edges.is_empty()).then_some(&edges[..]);
        let mut engine = NoraEngine::new(m, &mg, ee)?;
        let cfg = match (labels, fixed) {
            (Some(labels), _) => {
                let mut pairs: Vec<(usize, f64)> = labels.into_iter().collect();
                pairs.sort_by_key(|p| p.0);
                let (ids, vals): (Vec<usize>, Vec<f64>) = pairs.into_iter().unzip();
                tune_nora(&mut engine, &ids, &vals, &default_grid(), mode)?.config
            }
            (None, Some(c)) => c,
            (None, None) => NoraConfig::default(),
        };
        let scores = engine.scores(&cfg, mode)?;
        Ok((scores, serde_json::to_string(&cfg)?))
    })
    .map_err(to_py)
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    eval::pearson(&x, &y).map_err(to_py)
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    eval::spearman(&x, &y).map_err(to_py)
}

/// Share of total influence held by the top `percents` of nodes.
#[pyfunction]
#[pyo3(signature = (scores, percents=vec![1.0, 3.0, 10.0]))]
fn concentration(scores: Vec<f64>, percents: Vec<f64>) -> PyResult<Vec<f64>> {
    eval::concentration(&scores, &percents).map_err(to_py)
}

#[pymodule]
fn nie(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NieError", m.py().get_type::<NieError>())?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add_function(wrap_pyfunction!(nora, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(concentration, m)?)?;
    Ok(())
}
