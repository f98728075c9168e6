//! Influence score vectors and their CSV form (`node_id,score`).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Oracle,
    Nora,
    Mask,
    Predict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScores {
    pub scores: Vec<f64>,
    pub provenance: Provenance,
    pub task: Task,
    pub model_fingerprint: String,
    pub wall_time_secs: f64,
}

impl InfluenceScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Writes `node_id,score` rows with nine significant digits.
pub fn write_scores(path: &Path, scores: &[f64]) -> Result<()> {
    let mut body = String::with_capacity(scores.len() * 24);
    body.push_str("node_id,score\n");
    for (i, s) in scores.iter().enumerate() {
        let _ = writeln!(body, "{i},{s:.8e}");
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Reads a `node_id,score` file. Ids may be sparse or unordered; the
/// result has one entry per row, keyed by node id.
pub fn read_score_rows(path: &Path) -> Result<Vec<(usize, f64)>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("node_id") {
            continue;
        }
        let (id, score) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(path, idx + 1, "expected node_id,score"))?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, format!("bad node id {id:?}")))?;
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, format!("bad score {score:?}")))?;
        if !score.is_finite() {
            return Err(Error::parse(path, idx + 1, "non-finite score"));
        }
        out.push((id, score));
    }
    Ok(out)
}

/// Reads a complete score vector: ids must be exactly `0..N`.
pub fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let rows = read_score_rows(path)?;
    let mut scores = vec![f64::NAN; rows.len()];
    for (line, &(id, s)) in rows.iter().enumerate() {
        if id >= scores.len() || !scores[id].is_nan() {
            return Err(Error::parse(
                path,
                line + 2,
                format!("node ids must be a permutation of 0..{}", rows.len()),
            ));
        }
        scores[id] = s;
    }
    Ok(scores)
}
