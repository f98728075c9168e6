//! Correlation metrics and the few-shot evaluation protocol: a seeded 10%
//! subset of oracle scores is visible for tuning, the other 90% are held
//! out for scoring.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "vectors differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!(
            "{} points; at least 3 are needed",
            x.len()
        )));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    // sqrt of a rounded square is exact, so x = y gives exactly 1
    let denom = match (sxx * syy).sqrt() {
        d if d.is_finite() && d > 0.0 => d,
        _ => sxx.sqrt() * syy.sqrt(),
    };
    Ok((sxy / denom).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties get their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&ranks(x), &ranks(y))
}

/// Deterministic seed for a named experiment cell.
pub fn derive_seed(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Visible tuning ids and held-out test ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSubset {
    pub seed: u64,
    pub tune: Vec<usize>,
    pub test: Vec<usize>,
}

impl EvalSubset {
    /// Uniform draw of `⌈fraction·N⌉` tuning ids; the rest are test ids.
    pub fn draw(n: usize, fraction: f64, seed: u64) -> Result<EvalSubset> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::invalid(format!("fraction {fraction} not in (0, 1)")));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let k = ((fraction * n as f64).ceil() as usize).min(n);
        let mut tune = perm[..k].to_vec();
        let mut test = perm[k..].to_vec();
        tune.sort_unstable();
        test.sort_unstable();
        Ok(EvalSubset { seed, tune, test })
    }

    pub fn validate(&self) -> Result<()> {
        let tune: std::collections::HashSet<_> = self.tune.iter().collect();
        if let Some(&&bad) = self.test.iter().find(|i| tune.contains(i)).as_ref() {
            return Err(Error::SubsetOverlap(bad));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EvalSubset> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: EvalSubset = serde_json::from_str(&body)?;
        s.validate()?;
        Ok(s)
    }
}

pub fn pick(values: &[f64], ids: &[usize]) -> Vec<f64> {
    ids.iter().map(|&i| values[i]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub pearson: f64,
    pub spearman: f64,
    pub cycle: usize,
    pub label_fraction: f64,
    pub test_size: usize,
    pub oracle_secs: f64,
    pub method_secs: f64,
}

/// Correlation of a method with the oracle on the held-out ids.
pub fn evaluate_method(
    method: &str,
    method_scores: &[f64],
    oracle_scores: &[f64],
    subset: &EvalSubset,
    cycle: usize,
) -> Result<EvalReport> {
    if method_scores.len() != oracle_scores.len() {
        return Err(Error::invalid("method and oracle score vectors differ in length"));
    }
    subset.validate()?;
    let n = oracle_scores.len();
    if let Some(&bad) = subset.tune.iter().chain(&subset.test).find(|&&i| i >= n) {
        return Err(Error::NodeOutOfRange {
            node: bad,
            num_nodes: n,
        });
    }
    let m = pick(method_scores, &subset.test);
    let o = pick(oracle_scores, &subset.test);
    Ok(EvalReport {
        method: method.to_string(),
        pearson: pearson(&m, &o)?,
        spearman: spearman(&m, &o)?,
        cycle,
        label_fraction: subset.tune.len() as f64 / n.max(1) as f64,
        test_size: subset.test.len(),
        oracle_secs: 0.0,
        method_secs: 0.0,
    })
}

/// Per-cycle reports and their mean Pearson.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleSummary {
    pub method: String,
    pub runs: Vec<EvalReport>,
    pub mean_pearson: f64,
}

impl CycleSummary {
    pub fn new(method: &str, runs: Vec<EvalReport>) -> CycleSummary {
        let mean_pearson = runs.iter().map(|r| r.pearson).sum::<f64>() / runs.len().max(1) as f64;
        CycleSummary {
            method: method.to_string(),
            runs,
            mean_pearson,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityEntry {
    /// Model family, e.g. `gcn`.
    pub kind: String,
    pub hidden: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub mean: f64,
    /// Mean over pairs of the same kind.
    pub intra_mean: Option<f64>,
    /// Mean over pairs of different kinds.
    pub inter_mean: Option<f64>,
}

pub fn stability_analysis(entries: &[StabilityEntry]) -> Result<StabilityReport> {
    if entries.len() < 2 {
        return Err(Error::invalid("stability needs at least two score vectors"));
    }
    let n = entries[0].scores.len();
    if entries.iter().any(|e| e.scores.len() != n) {
        return Err(Error::invalid("score vectors differ in length"));
    }
    let k = entries.len();
    let mut matrix = vec![vec![1.0; k]; k];
    let (mut all, mut intra, mut inter) = (Vec::new(), Vec::new(), Vec::new());
    for a in 0..k {
        for b in a + 1..k {
            let r = pearson(&entries[a].scores, &entries[b].scores)?;
            matrix[a][b] = r;
            matrix[b][a] = r;
            all.push(r);
            if entries[a].kind == entries[b].kind {
                intra.push(r);
            } else {
                inter.push(r);
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(StabilityReport {
        labels: entries.iter().map(|e| format!("{}-{}", e.kind, e.hidden)).collect(),
        matrix,
        mean: mean(&all).expect("at least one pair"),
        intra_mean: mean(&intra),
        inter_mean: mean(&inter),
    })
}

/// Share of total influence held by the top `⌈k·N/100⌉` nodes, for each
/// `k` in `percents`.
pub fn concentration(scores: &[f64], percents: &[f64]) -> Result<Vec<f64>> {
    if let Some(&bad) = scores.iter().find(|&&s| !(s >= 0.0)) {
        return Err(Error::invalid(format!("negative or NaN score {bad}")));
    }
    let total: f64 = scores.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("all scores are zero"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = scores.len();
    percents
        .iter()
        .map(|&k| {
            if !(k > 0.0 && k <= 100.0) {
                return Err(Error::invalid(format!("percentage {k} not in (0, 100]")));
            }
            let top = ((k * n as f64 / 100.0).ceil() as usize).clamp(1, n);
            Ok(sorted[..top].iter().sum::<f64>() / total)
        })
        .collect()
}

/// Nested label sets for a prediction baseline: one permutation; the first
/// `fraction·N` ids are labeled and split 7:3 into train/validation; the
/// unlabeled rest is the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSplit {
    pub fraction: f64,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn label_splits(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<LabelSplit>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    fractions
        .iter()
        .map(|&f| {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::invalid(format!("label fraction {f} must be in (0, 1)")));
            }
            let k = ((f * n as f64).round() as usize).min(n);
            let (mut train, mut valid) = (Vec::new(), Vec::new());
            for (pos, &id) in perm[..k].iter().enumerate() {
                if pos % 10 < 7 {
                    train.push(id);
                } else {
                    valid.push(id);
                }
            }
            let mut test = perm[k..].to_vec();
            test.sort_unstable();
            Ok(LabelSplit {
                fraction: f,
                train,
                valid,
                test,
            })
        })
        .collect()
}

/// Runs `method(train, valid)` for each nested label fraction and scores
/// its output against the oracle on the unlabeled nodes.
pub fn label_sweep<F>(
    name: &str,
    oracle: &[f64],
    fractions: &[f64],
    seed: u64,
    mut method: F,
) -> Result<Vec<EvalReport>>
where
    F: FnMut(&[usize], &[usize]) -> Result<Vec<f64>>,
{
    let mut out = Vec::new();
    for split in label_splits(oracle.len(), fractions, seed)? {
        let start = Instant::now();
        let scores = method(&split.train, &split.valid)?;
        let secs = start.elapsed().as_secs_f64();
        let subset = EvalSubset {
            seed,
            tune: split.train.iter().chain(&split.valid).copied().collect(),
            test: split.test,
        };
        let mut report = evaluate_method(name, &scores, oracle, &subset, 0)?;
        report.label_fraction = split.fraction;
        report.method_secs = secs;
        out.push(report);
    }
    Ok(out)
}

/// Least-squares slope of `ln t` against `ln n`.
pub fn loglog_slope(ns: &[f64], times: &[f64]) -> Result<f64> {
    if ns.len() != times.len() || ns.len() < 3 {
        return Err(Error::invalid("slope fit needs at least 3 sizes"));
    }
    if ns.iter().chain(times).any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("sizes and times must be positive"));
    }
    let lx: Vec<f64> = ns.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = times.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if den == 0.0 {
        return Err(Error::invalid("all sizes are equal"));
    }
    Ok(num / den)
}
