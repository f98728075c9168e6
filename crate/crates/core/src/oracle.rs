//! Exact node influence by brute force: delete each node in turn, rerun
//! the model and total the change in every other prediction.
//!
//! Node task: `F(r) = Σ_{i≠r} ‖P(G)_i − P(G − r)_i‖₁` over class
//! probabilities. Link task: `F(r) = Σ_{(i,j) ∈ D \ D_r} |p(G)_ij − p(G − r)_ij|`
//! where `D_r` holds the pairs touching `r`.
//!
//! Candidates are independent, so they are spread over a rayon pool; every
//! score lands in its own slot and is computed the same way regardless of
//! scheduling, which makes parallel and serial runs bitwise identical.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gnn::{model_forward, GnnModel};
use crate::graph::{remove_node, Graph, Task, Topology};
use crate::scores::{read_score_rows, InfluenceScores, Provenance};

#[derive(Debug, Clone)]
pub struct OracleOptions {
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
    /// Partial-results file, rewritten every `checkpoint_every` nodes.
    pub progress_file: Option<PathBuf>,
    pub checkpoint_every: usize,
    /// Reuse scores already present in `progress_file`.
    pub resume: bool,
    /// Only score these nodes (others stay 0). `None` scores all nodes.
    pub candidates: Option<Vec<usize>>,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            workers: 1,
            progress_file: None,
            checkpoint_every: 256,
            resume: false,
            candidates: None,
        }
    }
}

/// Checks an evaluation pair set: non-empty, in range, no pair twice
/// (in either orientation).
pub fn validate_edge_set(num_nodes: usize, edges: &[(usize, usize)]) -> Result<()> {
    if edges.is_empty() {
        return Err(Error::EmptyEdgeSet);
    }
    let mut seen = HashSet::with_capacity(edges.len());
    for &(a, b) in edges {
        for node in [a, b] {
            if node >= num_nodes {
                return Err(Error::NodeOutOfRange { node, num_nodes });
            }
        }
        if !seen.insert((a.min(b), a.max(b))) {
            return Err(Error::DuplicateEdge(a, b));
        }
    }
    Ok(())
}

pub fn oracle_node(model: &GnnModel, graph: &Graph, opts: &OracleOptions) -> Result<InfluenceScores> {
    if model.task() != Task::NodeClassification {
        return Err(Error::invalid("oracle_node needs a node-classification model"));
    }
    let start = Instant::now();
    let base = model_forward(model, graph, None)?;
    let base = base.output();
    let scores = run(graph, model, opts, Task::NodeClassification, |r| {
        let view = remove_node(graph, r)?;
        let pred = model_forward(model, &view, None)?;
        let after = pred.output();
        let mut total = 0.0;
        for i in 0..graph.num_nodes() {
            if i == r {
                continue;
            }
            total += base
                .row(i)
                .iter()
                .zip(after.row(i))
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        }
        Ok(total)
    })?;
    Ok(InfluenceScores {
        scores,
        provenance: Provenance::Oracle,
        task: Task::NodeClassification,
        model_fingerprint: model.fingerprint(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// `graph` is the graph message passing runs on (training edges for a
/// split); `eval_edges` is the scored pair set.
pub fn oracle_link(
    model: &GnnModel,
    graph: &Graph,
    eval_edges: &[(usize, usize)],
    opts: &OracleOptions,
) -> Result<InfluenceScores> {
    if model.task() != Task::LinkPrediction {
        return Err(Error::invalid("oracle_link needs a link-prediction model"));
    }
    validate_edge_set(graph.num_nodes(), eval_edges)?;
    let start = Instant::now();
    let pairs = Arc::new(eval_edges.to_vec());
    let base = model_forward(model, graph, Some(&pairs))?
        .edge_probs
        .expect("link forward scores pairs");
    let scores = run(graph, model, opts, Task::LinkPrediction, |r| {
        let view = remove_node(graph, r)?;
        let after = model_forward(model, &view, Some(&pairs))?
            .edge_probs
            .expect("link forward scores pairs");
        Ok(pairs
            .iter()
            .zip(base.iter().zip(&after))
            .filter(|(&(i, j), _)| i != r && j != r)
            .map(|(_, (a, b))| (a - b).abs())
            .sum())
    })?;
    Ok(InfluenceScores {
        scores,
        provenance: Provenance::Oracle,
        task: Task::LinkPrediction,
        model_fingerprint: model.fingerprint(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

fn progress_header(model: &GnnModel, task: Task) -> String {
    format!("# model={} task={task}", model.fingerprint())
}

fn load_progress(path: &Path, header: &str, n: usize) -> Result<Vec<Option<f64>>> {
    let mut done = vec![None; n];
    if !path.exists() {
        return Ok(done);
    }
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if body.lines().next() != Some(header) {
        return Err(Error::invalid(format!(
            "{} was written for a different model or task",
            path.display()
        )));
    }
    for (id, score) in read_score_rows(path)? {
        if id >= n {
            return Err(Error::NodeOutOfRange {
                node: id,
                num_nodes: n,
            });
        }
        done[id] = Some(score);
    }
    Ok(done)
}

fn save_progress(path: &Path, header: &str, done: &[Option<f64>]) -> Result<()> {
    let mut body = String::new();
    body.push_str(header);
    body.push_str("\nnode_id,score\n");
    for (i, s) in done.iter().enumerate() {
        if let Some(s) = s {
            // full precision so a resumed run matches an uninterrupted one
            let _ = writeln!(body, "{i},{s:e}");
        }
    }
    let tmp = path.with_extension("partial.tmp");
    std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn run<F>(graph: &Graph, model: &GnnModel, opts: &OracleOptions, task: Task, score: F) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    let n = graph.num_nodes();
    let header = progress_header(model, task);
    let mut done = match (&opts.progress_file, opts.resume) {
        (Some(path), true) => load_progress(path, &header, n)?,
        _ => vec![None; n],
    };
    let candidates: Vec<usize> = match &opts.candidates {
        Some(c) => {
            if let Some(&bad) = c.iter().find(|&&r| r >= n) {
                return Err(Error::NodeOutOfRange {
                    node: bad,
                    num_nodes: n,
                });
            }
            c.clone()
        }
        None => (0..n).collect(),
    };
    let todo: Vec<usize> = candidates.into_iter().filter(|&r| done[r].is_none()).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let chunk = if opts.progress_file.is_some() {
        opts.checkpoint_every.max(1)
    } else {
        todo.len().max(1)
    };
    for block in todo.chunks(chunk) {
        let results: Vec<Result<f64>> = pool.install(|| block.par_iter().map(|&r| score(r)).collect());
        for (&r, s) in block.iter().zip(results) {
            done[r] = Some(s?);
        }
        if let Some(path) = &opts.progress_file {
            save_progress(path, &header, &done)?;
            log::info!(
                "oracle progress: {}/{n}",
                done.iter().filter(|s| s.is_some()).count()
            );
        }
    }
    Ok(done.into_iter().map(|s| s.unwrap_or(0.0)).collect())
}
