//! Wall-clock scaling of the brute-force oracle against NORA on a family of
//! Erdős–Rényi graphs with fixed mean degree.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::loglog_slope;
use crate::gnn::{train, GnnModel, LayerKind, ModelConfig, TrainConfig};
use crate::graph::{generate_synthetic, Graph, SplitSpec, SynthKind, SynthParams, Task};
use crate::nora::{NoraConfig, NoraEngine, NoraMode};
use crate::oracle::{oracle_node, OracleOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub kinds: Vec<LayerKind>,
    pub mean_degree: f64,
    pub hidden: usize,
    pub num_features: usize,
    pub num_classes: usize,
    pub train_epochs: usize,
    /// Timed repetitions per cell; the median is reported.
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![500, 1000, 2000, 4000],
            kinds: vec![LayerKind::Gcn],
            mean_degree: 8.0,
            hidden: 16,
            num_features: 32,
            num_classes: 4,
            train_epochs: 50,
            reps: 3,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 3 {
            return Err(Error::invalid("a scaling fit needs at least 3 sizes"));
        }
        if self.kinds.is_empty() || self.reps == 0 {
            return Err(Error::invalid("bench needs at least one model kind and one repetition"));
        }
        if let Some(&n) = self.sizes.iter().find(|&&n| (n as f64) <= self.mean_degree + 1.0) {
            return Err(Error::invalid(format!(
                "size {n} is too small for mean degree {}",
                self.mean_degree
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kind: LayerKind,
    pub method: String,
    pub n: usize,
    pub edges: usize,
    pub median_secs: f64,
    pub reps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub kind: LayerKind,
    pub oracle_slope: f64,
    pub nora_slope: f64,
    /// `oracle_slope − nora_slope`.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    pub fits: Vec<ScalingFit>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        (xs[k / 2 - 1] + xs[k / 2]) / 2.0
    }
}

fn time_reps<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<Vec<f64>> {
    (0..reps)
        .map(|_| {
            let start = Instant::now();
            f()?;
            Ok(start.elapsed().as_secs_f64())
        })
        .collect()
}

fn bench_graph(cfg: &BenchConfig, n: usize) -> Result<Graph> {
    let mut p = SynthParams::new(n);
    p.p = cfg.mean_degree / (n - 1) as f64;
    p.num_features = cfg.num_features;
    p.num_classes = cfg.num_classes;
    generate_synthetic(SynthKind::ErdosRenyi, &p, cfg.seed ^ n as u64)
}

fn trained_model(cfg: &BenchConfig, kind: LayerKind, graph: &Graph) -> Result<GnnModel> {
    let mc = ModelConfig {
        kind,
        task: Task::NodeClassification,
        in_dim: cfg.num_features,
        hidden: cfg.hidden,
        out_dim: cfg.num_classes,
        num_layers: 2,
    };
    let mut model = GnnModel::new(mc, cfg.seed)?;
    let split = SplitSpec::new(graph, Task::NodeClassification, cfg.seed)?;
    let tc = TrainConfig {
        epochs: cfg.train_epochs,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    train(&mut model, graph, &split, &tc)?;
    Ok(model)
}

/// Times a serial oracle and an all-node NORA pass (engine setup included)
/// for every kind and size, then fits the log-log slope of each.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let serial = OracleOptions::default();
    let nora_cfg = NoraConfig::default();
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for &kind in &cfg.kinds {
        let (mut oracle_t, mut nora_t) = (Vec::new(), Vec::new());
        for &n in &cfg.sizes {
            let graph = bench_graph(cfg, n)?;
            let model = trained_model(cfg, kind, &graph)?;
            let reps = time_reps(cfg.reps, || oracle_node(&model, &graph, &serial).map(drop))?;
            oracle_t.push(median(reps.clone()));
            rows.push(BenchRow {
                kind,
                method: "oracle".into(),
                n,
                edges: graph.num_edges(),
                median_secs: median(reps.clone()),
                reps,
            });
            let reps = time_reps(cfg.reps, || {
                NoraEngine::new(&model, &graph, None)?
                    .scores(&nora_cfg, NoraMode::Full)
                    .map(drop)
            })?;
            nora_t.push(median(reps.clone()));
            rows.push(BenchRow {
                kind,
                method: "nora".into(),
                n,
                edges: graph.num_edges(),
                median_secs: median(reps.clone()),
                reps,
            });
            log::info!("bench {kind} n={n} done");
        }
        let ns: Vec<f64> = cfg.sizes.iter().map(|&n| n as f64).collect();
        let oracle_slope = loglog_slope(&ns, &oracle_t)?;
        let nora_slope = loglog_slope(&ns, &nora_t)?;
        fits.push(ScalingFit {
            kind,
            oracle_slope,
            nora_slope,
            gap: oracle_slope - nora_slope,
        });
    }
    Ok(BenchReport {
        config: cfg.clone(),
        rows,
        fits,
    })
}

impl BenchReport {
    /// Median seconds for one cell.
    pub fn time(&self, kind: LayerKind, method: &str, n: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.kind == kind && r.method == method && r.n == n)
            .map(|r| r.median_secs)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,method,n,edges,median_secs\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{:e}", r.kind, r.method, r.n, r.edges, r.median_secs);
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| kind | n | edges | oracle (s) | nora (s) | ratio |\n|---|---|---|---|---|---|\n");
        for &kind in &self.config.kinds {
            for &n in &self.config.sizes {
                if let (Some(o), Some(f)) = (self.time(kind, "oracle", n), self.time(kind, "nora", n)) {
                    let edges = self.rows.iter().find(|r| r.kind == kind && r.n == n).map_or(0, |r| r.edges);
                    let _ = writeln!(out, "| {kind} | {n} | {edges} | {o:.4} | {f:.5} | {:.0} |", o / f);
                }
            }
        }
        out.push_str("\n| kind | oracle slope | nora slope | gap |\n|---|---|---|---|\n");
        for f in &self.fits {
            let _ = writeln!(
                out,
                "| {} | {:.3} | {:.3} | {:.3} |",
                f.kind, f.oracle_slope, f.nora_slope, f.gap
            );
        }
        out
    }
}
