use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `manifest.json` of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_nodes: usize,
    pub num_features: usize,
    pub num_classes: usize,
    #[serde(default = "default_task")]
    pub task: String,
}

fn default_task() -> String {
    "node-classification".to_string()
}

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Loads a dataset directory (`manifest.json`, `edges.csv`,
/// `features.csv`, `labels.csv`). Edge direction is dropped, duplicate
/// edges merged; self-edges are dropped with a warning.
pub fn load_dataset(dir: &Path) -> Result<(Graph, DatasetManifest)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_str(&read(&manifest_path)?)
        .map_err(|e| Error::parse(&manifest_path, e.line(), e.to_string()))?;
    let n = manifest.num_nodes;

    let edges_path = dir.join("edges.csv");
    let mut edges = Vec::new();
    for (idx, line) in read(&edges_path)?.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 2 {
            return Err(Error::parse(&edges_path, line_no, "expected two columns"));
        }
        let mut ids = [0usize; 2];
        for (slot, cell) in ids.iter_mut().zip(&cells) {
            *slot = cell.parse().map_err(|_| {
                Error::parse(&edges_path, line_no, format!("non-numeric node id {cell:?}"))
            })?;
            if *slot >= n {
                return Err(Error::parse(
                    &edges_path,
                    line_no,
                    format!("node id {slot} >= num_nodes {n}"),
                ));
            }
        }
        edges.push((ids[0], ids[1]));
    }

    let features_path = dir.join("features.csv");
    let mut data = Vec::with_capacity(n * manifest.num_features);
    let mut rows = 0;
    for (idx, line) in read(&features_path)?.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::parse(&features_path, line_no, format!("non-numeric cell {cell:?}"))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(&features_path, line_no, "non-finite feature"));
            }
            data.push(v);
        }
        if data.len() - before != manifest.num_features {
            return Err(Error::parse(
                &features_path,
                line_no,
                format!(
                    "expected {} columns, found {}",
                    manifest.num_features,
                    data.len() - before
                ),
            ));
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::parse(
            &features_path,
            rows,
            format!("feature row count {rows} does not match num_nodes {n}"),
        ));
    }
    let features = Tensor::from_vec(n, manifest.num_features, data)?;

    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.exists() {
        let mut labels = Vec::with_capacity(n);
        for (idx, line) in read(&labels_path)?.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let label: usize = line.parse().map_err(|_| {
                Error::parse(&labels_path, idx + 1, format!("non-numeric label {line:?}"))
            })?;
            if manifest.num_classes > 0 && label >= manifest.num_classes {
                return Err(Error::parse(
                    &labels_path,
                    idx + 1,
                    format!("label {label} >= num_classes {}", manifest.num_classes),
                ));
            }
            labels.push(label);
        }
        if labels.len() != n {
            return Err(Error::parse(
                &labels_path,
                labels.len(),
                format!("label count {} does not match num_nodes {n}", labels.len()),
            ));
        }
        Some(labels)
    } else if manifest.task == "node-classification" {
        return Err(Error::MissingFile(labels_path));
    } else {
        None
    };

    let (mut graph, self_edges) = Graph::from_edges(n, &edges, features, labels)?;
    if self_edges > 0 {
        log::warn!(
            "{}: dropped {self_edges} self-edge(s)",
            edges_path.display()
        );
    }
    if manifest.num_classes > 0 {
        graph.set_num_classes(manifest.num_classes);
    }
    Ok((graph, manifest))
}

/// Writes `graph` as a dataset directory readable by [`load_dataset`].
pub fn write_dataset(graph: &Graph, task: &str, dir: &Path) -> Result<()> {
    use std::fmt::Write as _;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = DatasetManifest {
        num_nodes: super::Topology::num_nodes(graph),
        num_features: graph.num_features(),
        num_classes: graph.num_classes(),
        task: task.to_string(),
    };
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    write("manifest.json", serde_json::to_string_pretty(&manifest)?)?;
    let mut edges = String::new();
    for (a, b) in graph.edges() {
        let _ = writeln!(edges, "{a},{b}");
    }
    write("edges.csv", edges)?;
    let feats = super::Topology::features(graph);
    let mut body = String::new();
    for r in 0..feats.rows() {
        let row: Vec<String> = feats.row(r).iter().map(|v| format!("{v}")).collect();
        body.push_str(&row.join(","));
        body.push('\n');
    }
    write("features.csv", body)?;
    if let Some(labels) = graph.labels() {
        let mut body = String::new();
        for l in labels {
            let _ = writeln!(body, "{l}");
        }
        write("labels.csv", body)?;
    }
    Ok(())
}
