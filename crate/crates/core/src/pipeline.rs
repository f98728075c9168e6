//! End-to-end runs from a JSON config: train, oracle, tune, score, evaluate.
//!
//! Trained models and oracle scores are cached under a cache directory,
//! keyed by a hash of everything they depend on, so reruns skip them.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    default_mask_grid, optimize_mask, predict_scores, tune_mask, MaskConfig, PredictConfig,
    PredictKind, Validation,
};
use crate::error::{Error, Result};
use crate::eval::{derive_seed, evaluate_method, pick, CycleSummary, EvalReport, EvalSubset};
use crate::gnn::{hex, train, GnnModel, LayerKind, ModelConfig, TrainConfig};
use crate::graph::{
    cycle_split, generate_synthetic, load_dataset, Graph, SplitSpec, SynthKind, SynthParams, Task,
    Topology, NUM_CYCLES,
};
use crate::nora::{default_grid, tune_nora, NoraConfig, NoraEngine, NoraMode};
use crate::oracle::{oracle_link, oracle_node, OracleOptions};
use crate::scores::{read_scores, write_scores};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Nora,
    NoraT1,
    NoraT2,
    Mask,
    PredictN,
    PredictE,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Nora => "nora",
            Method::NoraT1 => "nora-t1",
            Method::NoraT2 => "nora-t2",
            Method::Mask => "mask",
            Method::PredictN => "predict-n",
            Method::PredictE => "predict-e",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::invalid(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Directory in the on-disk dataset format.
    Path(PathBuf),
    Synthetic {
        kind: SynthKind,
        params: SynthParams,
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Graph> {
        match self {
            DatasetSource::Path(p) => Ok(load_dataset(p)?.0),
            DatasetSource::Synthetic { kind, params, seed } => generate_synthetic(*kind, params, *seed),
        }
    }
}

impl PartialEq for SynthParams {
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_value(self).ok() == serde_json::to_value(other).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: LayerKind,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
}

fn default_hidden() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_cycles() -> Vec<usize> {
    vec![0]
}
fn default_fraction() -> f64 {
    0.1
}
fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetSource,
    pub task: Task,
    pub model: ModelSpec,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_cycles")]
    pub cycles: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Share of oracle scores visible for tuning and training.
    #[serde(default = "default_fraction")]
    pub tune_fraction: f64,
    #[serde(default)]
    pub nora_grid: Option<Vec<NoraConfig>>,
    #[serde(default)]
    pub mask_grid: Option<Vec<MaskConfig>>,
    #[serde(default)]
    pub predict: PredictConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = serde_json::from_str(&body)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Everything that can be checked before any compute starts.
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::invalid("no methods requested"));
        }
        if self.cycles.is_empty() {
            return Err(Error::invalid("no split cycles requested"));
        }
        if let Some(&c) = self.cycles.iter().find(|&&c| c >= NUM_CYCLES) {
            return Err(Error::invalid(format!("split cycle {c} out of range 0..{NUM_CYCLES}")));
        }
        if !(self.tune_fraction > 0.0 && self.tune_fraction < 1.0) {
            return Err(Error::invalid("tune_fraction must be in (0, 1)"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        if self.model.hidden == 0 || self.model.num_layers == 0 {
            return Err(Error::invalid("model needs positive hidden size and layer count"));
        }
        for c in self.nora_grid.iter().flatten() {
            c.validate()?;
        }
        for c in self.mask_grid.iter().flatten() {
            c.validate()?;
        }
        if let DatasetSource::Path(p) = &self.dataset {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub cycle: Option<usize>,
    pub secs: f64,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: PipelineConfig,
    pub dataset_fingerprint: String,
    pub model_configs: Vec<ModelConfig>,
    pub model_fingerprints: Vec<String>,
    pub artifacts: Vec<PathBuf>,
    pub stages: Vec<StageRecord>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

/// One method on one cycle. `report` is absent when the correlation is
/// undefined, with the reason in `note`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub cycle: usize,
    /// Relative to the output directory.
    pub scores_path: PathBuf,
    pub report: Option<EvalReport>,
    pub note: Option<String>,
    /// Tuned or chosen hyperparameters.
    pub settings: serde_json::Value,
}

/// Deterministic part of a run: rerunning the same config gives the same
/// file bitwise. Wall times live in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub outcomes: Vec<MethodOutcome>,
    pub summaries: Vec<CycleSummary>,
}

impl PipelineReport {
    pub fn mean_pearson(&self, method: Method) -> Option<f64> {
        self.summaries
            .iter()
            .find(|s| s.method == method.name() && !s.runs.is_empty())
            .map(|s| s.mean_pearson)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: RunManifest,
    pub report: PipelineReport,
    pub manifest_path: PathBuf,
    pub report_path: PathBuf,
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex(&h.finalize())
}

/// Content hash of a graph: structure, features and labels.
pub fn graph_fingerprint(g: &Graph) -> String {
    let mut h = Sha256::new();
    h.update((g.num_nodes() as u64).to_le_bytes());
    for (a, b) in g.edges() {
        h.update((a as u64).to_le_bytes());
        h.update((b as u64).to_le_bytes());
    }
    for v in g.features().data() {
        h.update(v.to_le_bytes());
    }
    for &l in g.labels().unwrap_or(&[]) {
        h.update((l as u64).to_le_bytes());
    }
    hex(&h.finalize())
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    cache_dir: &'a Path,
    stages: Vec<StageRecord>,
    artifacts: Vec<PathBuf>,
}

impl Run<'_> {
    fn record(&mut self, stage: &str, cycle: Option<usize>, start: Instant, cached: bool) {
        self.stages.push(StageRecord {
            stage: stage.to_string(),
            cycle,
            secs: start.elapsed().as_secs_f64(),
            cached,
        });
    }

    fn model(&mut self, graph: &Graph, split: &SplitSpec, data_fp: &str, cycle: usize) -> Result<GnnModel> {
        let cfg = self.cfg;
        let out_dim = match cfg.task {
            Task::NodeClassification => graph.num_classes(),
            Task::LinkPrediction => cfg.model.hidden,
        };
        let mc = ModelConfig {
            kind: cfg.model.kind,
            task: cfg.task,
            in_dim: graph.num_features(),
            hidden: cfg.model.hidden,
            out_dim,
            num_layers: cfg.model.num_layers,
        };
        let key = sha_hex(&[
            b"model",
            data_fp.as_bytes(),
            &serde_json::to_vec(&mc)?,
            &serde_json::to_vec(&cfg.train)?,
            &cfg.seed.to_le_bytes(),
            &cycle.to_le_bytes(),
        ]);
        let path = self.cache_dir.join("models").join(format!("{key}.json"));
        let start = Instant::now();
        if path.exists() {
            let model = GnnModel::load(&path)?;
            self.record("train", Some(cycle), start, true);
            return Ok(model);
        }
        let mut model = GnnModel::new(mc, cfg.seed)?;
        let tc = TrainConfig {
            seed: cfg.seed,
            ..cfg.train.clone()
        };
        let rep = train(&mut model, graph, split, &tc)?;
        log::info!("cycle {cycle}: trained, test metric {:.4}", rep.test_metric);
        mkdir(path.parent().expect("cache path has a parent"))?;
        model.save(&path)?;
        self.record("train", Some(cycle), start, false);
        Ok(model)
    }

    fn oracle(
        &mut self,
        model: &GnnModel,
        graph: &Graph,
        eval_edges: &[(usize, usize)],
        data_fp: &str,
        cycle: usize,
    ) -> Result<Vec<f64>> {
        let edges_bytes = serde_json::to_vec(eval_edges)?;
        let key = sha_hex(&[b"oracle", data_fp.as_bytes(), model.fingerprint().as_bytes(), &edges_bytes]);
        let dir = self.cache_dir.join("oracle");
        let path = dir.join(format!("{key}.csv"));
        let start = Instant::now();
        if path.exists() {
            let s = read_scores(&path)?;
            self.record("oracle", Some(cycle), start, true);
            return Ok(s);
        }
        mkdir(&dir)?;
        let progress = dir.join(format!("{key}.progress"));
        let opts = OracleOptions {
            workers: self.cfg.workers,
            progress_file: Some(progress.clone()),
            resume: true,
            ..OracleOptions::default()
        };
        let scores = match self.cfg.task {
            Task::NodeClassification => oracle_node(model, graph, &opts)?,
            Task::LinkPrediction => oracle_link(model, graph, eval_edges, &opts)?,
        };
        write_scores(&path, &scores.scores)?;
        // the finished file supersedes the partial one
        let _ = std::fs::remove_file(&progress);
        self.record("oracle", Some(cycle), start, false);
        // read back so fresh and cached runs see the same rounded values
        read_scores(&path)
    }
}

/// Runs every requested method on every requested cycle. Any failing
/// stage aborts the run with its name; files already written stay.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path, cache_dir: &Path) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let started_unix = now_unix();
    mkdir(out_dir)?;
    let mut run = Run {
        cfg,
        cache_dir,
        stages: Vec::new(),
        artifacts: Vec::new(),
    };
    let start = Instant::now();
    let graph = cfg.dataset.load().map_err(|e| e.in_stage("dataset"))?;
    let data_fp = graph_fingerprint(&graph);
    run.record("dataset", None, start, false);
    let base_split = SplitSpec::new(&graph, cfg.task, cfg.seed).map_err(|e| e.in_stage("split"))?;
    let (mut model_configs, mut model_fps) = (Vec::new(), Vec::new());
    let mut outcomes = Vec::new();
    for &cycle in &cfg.cycles {
        let split = cycle_split(&base_split, cycle);
        let model = run
            .model(&graph, &split, &data_fp, cycle)
            .map_err(|e| e.in_stage(format!("train (cycle {cycle})")))?;
        model_configs.push(model.config.clone());
        model_fps.push(model.fingerprint());
        let mg = split.message_graph(&graph).map_err(|e| e.in_stage("split"))?;
        let eval_edges = match cfg.task {
            Task::NodeClassification => Vec::new(),
            Task::LinkPrediction => split.eval_edges(),
        };
        let oracle = run
            .oracle(&model, &mg, &eval_edges, &data_fp, cycle)
            .map_err(|e| e.in_stage(format!("oracle (cycle {cycle})")))?;
        let cycle_dir = out_dir.join(format!("cycle{cycle}"));
        mkdir(&cycle_dir)?;
        let oracle_path = cycle_dir.join("oracle.csv");
        write_scores(&oracle_path, &oracle)?;
        run.artifacts.push(oracle_path);
        let seed = derive_seed(&[
            &data_fp,
            &cfg.model.kind.to_string(),
            &cfg.task.to_string(),
            &cfg.seed.to_string(),
            &cycle.to_string(),
        ]);
        let subset = EvalSubset::draw(graph.num_nodes(), cfg.tune_fraction, seed)?;
        let subset_path = cycle_dir.join("subset.json");
        subset.save(&subset_path)?;
        run.artifacts.push(subset_path);
        let ee = (cfg.task == Task::LinkPrediction).then_some(&eval_edges[..]);
        let ctx = MethodCtx {
            cfg,
            model: &model,
            graph: &mg,
            eval_edges: ee,
            oracle: &oracle,
            subset: &subset,
        };
        for &method in &cfg.methods {
            let start = Instant::now();
            let (scores, settings) = ctx
                .scores(method)
                .map_err(|e| e.in_stage(format!("{} (cycle {cycle})", method.name())))?;
            run.record(method.name(), Some(cycle), start, false);
            let path = cycle_dir.join(format!("{}.csv", method.name()));
            write_scores(&path, &scores)?;
            run.artifacts.push(path.clone());
            let (report, note) = match evaluate_method(method.name(), &scores, &oracle, &subset, cycle) {
                Ok(r) => (Some(r), None),
                Err(Error::UndefinedCorrelation(why)) => (None, Some(format!("correlation undefined: {why}"))),
                Err(e) => return Err(e.in_stage(format!("eval (cycle {cycle})"))),
            };
            outcomes.push(MethodOutcome {
                method,
                cycle,
                scores_path: path.strip_prefix(out_dir).unwrap_or(&path).to_path_buf(),
                report,
                note,
                settings,
            });
        }
    }
    let summaries = cfg
        .methods
        .iter()
        .map(|&m| {
            let runs = outcomes
                .iter()
                .filter(|o| o.method == m)
                .filter_map(|o| o.report.clone())
                .collect();
            CycleSummary::new(m.name(), runs)
        })
        .collect();
    let report = PipelineReport { outcomes, summaries };
    let report_path = out_dir.join("report.json");
    write_json(&report_path, &report)?;
    run.artifacts.push(report_path.clone());
    let manifest_path = out_dir.join("manifest.json");
    run.artifacts.push(manifest_path.clone());
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        dataset_fingerprint: data_fp,
        model_configs,
        model_fingerprints: model_fps,
        artifacts: run.artifacts,
        stages: run.stages,
        started_unix,
        finished_unix: now_unix(),
    };
    write_json(&manifest_path, &manifest)?;
    Ok(PipelineOutcome {
        manifest,
        report,
        manifest_path,
        report_path,
    })
}

struct MethodCtx<'a> {
    cfg: &'a PipelineConfig,
    model: &'a GnnModel,
    graph: &'a Graph,
    eval_edges: Option<&'a [(usize, usize)]>,
    oracle: &'a [f64],
    subset: &'a EvalSubset,
}

impl MethodCtx<'_> {
    fn scores(&self, method: Method) -> Result<(Vec<f64>, serde_json::Value)> {
        let tune = &self.subset.tune;
        let tune_vals = pick(self.oracle, tune);
        match method {
            Method::Nora | Method::NoraT1 | Method::NoraT2 => {
                let mode = match method {
                    Method::Nora => NoraMode::Full,
                    Method::NoraT1 => NoraMode::T1,
                    _ => NoraMode::T2,
                };
                let mut engine = NoraEngine::new(self.model, self.graph, self.eval_edges)?;
                let grid = self.cfg.nora_grid.clone().unwrap_or_else(default_grid);
                let (config, tune_pearson) = if tune.len() >= 3 {
                    match tune_nora(&mut engine, tune, &tune_vals, &grid, mode) {
                        Ok(t) => (t.config, Some(t.pearson)),
                        Err(Error::UndefinedCorrelation(_)) => (NoraConfig::default(), None),
                        Err(e) => return Err(e),
                    }
                } else {
                    log::warn!("tuning subset too small; using default NORA settings");
                    (NoraConfig::default(), None)
                };
                let scores = engine.scores(&config, mode)?;
                let settings = serde_json::json!({"config": config, "tune_pearson": tune_pearson});
                Ok((scores, settings))
            }
            Method::Mask => {
                let grid = self.cfg.mask_grid.clone().unwrap_or_else(default_mask_grid);
                let run = if tune.len() >= 3 {
                    let val = Validation {
                        ids: tune,
                        values: &tune_vals,
                    };
                    tune_mask(self.model, self.graph, &grid, self.eval_edges, val)?
                } else {
                    optimize_mask(self.model, self.graph, &grid[0], self.eval_edges, None)?
                };
                let settings = serde_json::json!({
                    "config": run.config,
                    "best_epoch": run.best_epoch,
                    "health": run.health,
                });
                Ok((run.scores, settings))
            }
            Method::PredictN | Method::PredictE => {
                let kind = if method == Method::PredictN {
                    PredictKind::Node
                } else {
                    PredictKind::Edge
                };
                // 7:3 train/validation over a seeded order of the visible ids
                let mut ids = tune.clone();
                ids.shuffle(&mut ChaCha8Rng::seed_from_u64(self.subset.seed));
                let (train, valid): (Vec<_>, Vec<_>) =
                    ids.iter().enumerate().partition(|(pos, _)| pos % 10 < 7);
                let train: Vec<usize> = train.into_iter().map(|(_, &i)| i).collect();
                let valid: Vec<usize> = valid.into_iter().map(|(_, &i)| i).collect();
                let (tv, vv) = (pick(self.oracle, &train), pick(self.oracle, &valid));
                let pc = PredictConfig {
                    seed: self.cfg.seed,
                    ..self.cfg.predict.clone()
                };
                let run = predict_scores(
                    self.graph,
                    kind,
                    Validation { ids: &train, values: &tv },
                    Validation { ids: &valid, values: &vv },
                    &pc,
                )?;
                let settings = serde_json::json!({"config": pc, "best_epoch": run.best_epoch});
                Ok((run.scores, settings))
            }
        }
    }
}
