use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    ErdosRenyi,
    BarabasiAlbert,
    Star,
    Path,
    Cycle,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erdos-renyi" | "er" => Ok(SynthKind::ErdosRenyi),
            "barabasi-albert" | "ba" => Ok(SynthKind::BarabasiAlbert),
            "star" => Ok(SynthKind::Star),
            "path" => Ok(SynthKind::Path),
            "cycle" => Ok(SynthKind::Cycle),
            other => Err(Error::invalid(format!("unknown graph kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthParams {
    pub n: usize,
    /// Edge probability (Erdős–Rényi).
    #[serde(default)]
    pub p: f64,
    /// Edges attached per new node (Barabási–Albert).
    #[serde(default = "one")]
    pub m: usize,
    #[serde(default = "eight")]
    pub num_features: usize,
    #[serde(default = "two")]
    pub num_classes: usize,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn eight() -> usize {
    8
}

impl SynthParams {
    pub fn new(n: usize) -> Self {
        SynthParams {
            n,
            p: 0.0,
            m: 1,
            num_features: 8,
            num_classes: 2,
        }
    }
}

/// Generates a graph with standard-normal features and uniform random
/// labels. Output is a pure function of `(kind, params, seed)`.
pub fn generate_synthetic(kind: SynthKind, params: &SynthParams, seed: u64) -> Result<Graph> {
    let n = params.n;
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    if !(0.0..=1.0).contains(&params.p) {
        return Err(Error::invalid(format!("edge probability {} not in [0, 1]", params.p)));
    }
    if kind == SynthKind::BarabasiAlbert && (params.m == 0 || params.m >= n) {
        return Err(Error::invalid(format!(
            "attachment count m = {} must be in [1, n)",
            params.m
        )));
    }
    if params.num_classes == 0 {
        return Err(Error::invalid("num_classes must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = match kind {
        SynthKind::Star => (1..n).map(|i| (0, i)).collect(),
        SynthKind::Path => (1..n).map(|i| (i - 1, i)).collect(),
        SynthKind::Cycle => {
            let mut e: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
            if n > 2 {
                e.push((n - 1, 0));
            }
            e
        }
        SynthKind::ErdosRenyi => erdos_renyi(n, params.p, &mut rng),
        SynthKind::BarabasiAlbert => barabasi_albert(n, params.m, &mut rng),
    };
    let mut features = Tensor::zeros(n, params.num_features);
    for v in features.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    let labels = (0..n)
        .map(|_| rng.random_range(0..params.num_classes))
        .collect();
    let (mut g, _) = Graph::from_edges(n, &edges, features, Some(labels))?;
    g.set_num_classes(params.num_classes);
    Ok(g)
}

fn erdos_renyi(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    if p <= 0.0 {
        return edges;
    }
    for a in 0..n {
        for b in a + 1..n {
            if rng.random::<f64>() < p {
                edges.push((a, b));
            }
        }
    }
    edges
}

fn barabasi_albert(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    // every endpoint occurrence, so uniform sampling is degree-proportional
    let mut endpoints: Vec<usize> = Vec::new();
    // seed graph: star on the first m + 1 nodes
    for i in 1..=m {
        edges.push((0, i));
        endpoints.extend([0, i]);
    }
    for new in m + 1..n {
        let mut targets: Vec<usize> = Vec::with_capacity(m);
        while targets.len() < m {
            let t = *endpoints.choose(rng).expect("seed graph has edges");
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        for t in targets {
            edges.push((t, new));
            endpoints.extend([t, new]);
        }
    }
    edges
}
