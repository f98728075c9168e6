//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Runs without the libtest harness so every line is printed whether or
//! not output capture is on. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 3`.
//!
//! Trained Cora models and oracle scores are cached under the cargo target
//! tmp dir, so only the first run pays for them.

use std::path::{Path, PathBuf};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use nie_core::baselines::{optimize_mask, predict_scores, MaskConfig, MaskHealth, PredictConfig, PredictKind, Validation};
use nie_core::bench::{run_bench, BenchConfig};
use nie_core::counters;
use nie_core::eval::{concentration, label_sweep, pearson, pick, stability_analysis, StabilityEntry};
use nie_core::gnn::{
    forward_taped, layer_forward, model_forward, Activation, ForwardOptions, GnnLayer, GnnModel, Head, LayerKind,
    LayerVars, ModelConfig, Propagation,
};
use nie_core::nora::{damping, default_grid, topo_delta, NoraConfig, NoraEngine, NoraMode};
use nie_core::oracle::{oracle_link, oracle_node, OracleOptions};
use nie_core::pipeline::{run_pipeline, DatasetSource, Method, ModelSpec, PipelineConfig, PipelineOutcome};
use nie_core::scores::read_scores;
use nie_core::{generate_synthetic, remove_node, Graph, SynthKind, SynthParams, Task, Tensor, Topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;
type Property = fn() -> Result<(), String>;

const KINDS: [LayerKind; 3] = [LayerKind::Gcn, LayerKind::SageMean, LayerKind::Gat1];
const TASKS: [Task; 2] = [Task::NodeClassification, Task::LinkPrediction];

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(r, c, data).unwrap()
}

fn er(n: usize, p: f64, features: usize, seed: u64) -> Graph {
    let mut params = SynthParams::new(n);
    params.p = p;
    params.num_features = features;
    params.num_classes = 3;
    generate_synthetic(SynthKind::ErdosRenyi, &params, seed).unwrap()
}

fn ba(n: usize, seed: u64) -> Graph {
    let mut p = SynthParams::new(n);
    p.m = 2;
    generate_synthetic(SynthKind::BarabasiAlbert, &p, seed).unwrap()
}

fn small_model(kind: LayerKind, task: Task, in_dim: usize, seed: u64) -> GnnModel {
    let cfg = ModelConfig {
        kind,
        task,
        in_dim,
        hidden: 5,
        out_dim: match task {
            Task::NodeClassification => 3,
            Task::LinkPrediction => 4,
        },
        num_layers: 2,
    };
    GnnModel::new(cfg, seed).unwrap()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

// ---------------------------------------------------------------- 1

/// Random projection of the model output: class probabilities for the node
/// task, pair probabilities for the link task.
fn projected_loss(model: &GnnModel, g: &Graph, pairs: &Arc<Vec<(usize, usize)>>, proj: &Tensor) -> f64 {
    let p = model_forward(model, g, Some(pairs)).unwrap();
    let out = match model.task() {
        Task::NodeClassification => p.output().data().to_vec(),
        Task::LinkPrediction => p.edge_probs.unwrap(),
    };
    out.iter().zip(proj.data()).map(|(a, b)| a * b).sum()
}

fn with_features(g: &Graph, x: Tensor) -> Graph {
    Graph::from_edges(g.num_nodes(), &g.edges(), x, g.labels().map(<[usize]>::to_vec))
        .unwrap()
        .0
}

/// Worst relative error between autodiff and central differences for one
/// random instance.
fn fd_instance(kind: LayerKind, task: Task, seed: u64) -> f64 {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(6..=20);
    let g = er(n, 0.3, 4, seed);
    let model = small_model(kind, task, 4, seed);
    let pairs: Arc<Vec<(usize, usize)>> = Arc::new(
        (0..6)
            .map(|_| {
                let a = rng.random_range(0..n);
                (a, (a + rng.random_range(1..n)) % n)
            })
            .collect(),
    );
    let rows = match task {
        Task::NodeClassification => n * 3,
        Task::LinkPrediction => pairs.len(),
    };
    let proj = rand_tensor(&mut rng, rows, 1);

    let opts = ForwardOptions {
        params_require_grad: true,
        features_require_grad: true,
        edges: Some(Arc::clone(&pairs)),
        ..ForwardOptions::default()
    };
    let mut fwd = forward_taped(&model, &g, &opts).unwrap();
    let out = match task {
        Task::NodeClassification => *fwd.hidden.last().unwrap(),
        Task::LinkPrediction => fwd.edge_probs.unwrap(),
    };
    let tape = &mut fwd.tape;
    let (r, c) = tape.value(out).shape();
    let w = tape.leaf(Tensor::from_vec(r, c, proj.data().to_vec()).unwrap(), false).unwrap();
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(FLOOR);
    let mut worst = 0.0f64;
    for (i, &v) in fwd.params.iter().enumerate() {
        let analytic = grads.wrt(v);
        for k in 0..analytic.data().len() {
            let mut plus = model.clone();
            Arc::make_mut(plus.params_mut()[i]).data_mut()[k] += H;
            let mut minus = model.clone();
            Arc::make_mut(minus.params_mut()[i]).data_mut()[k] -= H;
            let numeric = (projected_loss(&plus, &g, &pairs, &proj) - projected_loss(&minus, &g, &pairs, &proj)) / (2.0 * H);
            worst = worst.max(rel(analytic.data()[k], numeric));
        }
    }
    let analytic = grads.wrt(fwd.hidden[0]);
    for k in 0..analytic.data().len() {
        let mut xp = (**g.features()).clone();
        xp.data_mut()[k] += H;
        let mut xm = (**g.features()).clone();
        xm.data_mut()[k] -= H;
        let numeric = (projected_loss(&model, &with_features(&g, xp), &pairs, &proj)
            - projected_loss(&model, &with_features(&g, xm), &pairs, &proj))
            / (2.0 * H);
        worst = worst.max(rel(analytic.data()[k], numeric));
    }
    worst
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut instances = 0;
    for kind in KINDS {
        for task in TASKS {
            for seed in 0..20 {
                let e = fd_instance(kind, task, seed);
                ensure(e < 1e-3, format!("{kind} {task} seed {seed}: relative error {e:.2e}"))?;
                worst = worst.max(e);
                instances += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("{instances} instances, max rel err {worst:.2e}, {secs:.1} s"))
}

// ---------------------------------------------------------------- 2

fn c2_jacobian() -> Outcome {
    let d_in = 4;
    let d_out = 3;
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let g = ba(12, seed);
        let w_m = rand_tensor(&mut rng, d_in, d_in);
        let w_s = rand_tensor(&mut rng, d_in, d_in);
        let w_u = rand_tensor(&mut rng, d_in, d_out);
        let layer = GnnLayer {
            kind: LayerKind::Gcn,
            activation: Activation::None,
            w_m: Arc::new(w_m.clone()),
            w_s: Some(Arc::new(w_s.clone())),
            w_u: Some(Arc::new(w_u.clone())),
            bias: Some(Arc::new(rand_tensor(&mut rng, 1, d_out))),
            att_src: None,
            att_dst: None,
        };
        let prop = Propagation::new(&g);
        let h_in = Arc::new(rand_tensor(&mut rng, 12, d_in));
        for r in 0..12 {
            // column form W_u(W_s + α_rr W_m) is, for row vectors, the
            // transpose of (W_s + α_rr W_m) W_u
            let a_rr = 1.0 / (g.degrees()[r] as f64 + 1.0);
            let mut expected = vec![vec![0.0; d_out]; d_in];
            for (j, row) in expected.iter_mut().enumerate() {
                for (k, cell) in row.iter_mut().enumerate() {
                    *cell = (0..d_in)
                        .map(|t| (w_s.get(j, t) + a_rr * w_m.get(j, t)) * w_u.get(t, k))
                        .sum();
                }
            }
            for k in 0..d_out {
                let mut tape = nie_core::Tape::new();
                let h = tape.leaf_shared(Arc::clone(&h_in), true).map_err(e2s)?;
                let vars = LayerVars::place(&mut tape, &layer, false).map_err(e2s)?;
                let out = layer_forward(&mut tape, &layer, &vars, &prop, h, None).map_err(e2s)?;
                let col = tape.slice_cols(out, k, k + 1).map_err(e2s)?;
                let pick = tape.select_rows(col, &Arc::new(vec![r])).map_err(e2s)?;
                let s = tape.sum_all(pick).map_err(e2s)?;
                let grads = tape.backward(s).map_err(e2s)?;
                let gh = grads.wrt(h);
                for (j, row) in expected.iter().enumerate() {
                    worst = worst.max((gh.get(r, j) - row[k]).abs());
                }
            }
        }
    }
    ensure(worst < 1e-9, format!("max abs diff {worst:.2e}"))?;
    Ok(format!("5 graphs x 12 nodes, max abs diff {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

fn scalar_layer(w_s: Option<f64>, w_u: Option<f64>) -> GnnLayer {
    GnnLayer {
        kind: LayerKind::Gcn,
        activation: Activation::None,
        w_m: Arc::new(Tensor::scalar(1.0)),
        w_s: w_s.map(|v| Arc::new(Tensor::scalar(v))),
        w_u: w_u.map(|v| Arc::new(Tensor::scalar(v))),
        bias: None,
        att_src: None,
        att_dst: None,
    }
}

fn scalar_graph(n: usize, edges: &[(usize, usize)], x: &[f64]) -> Graph {
    Graph::from_edges(n, edges, Tensor::from_vec(n, 1, x.to_vec()).unwrap(), None)
        .unwrap()
        .0
}

fn c3_oracle() -> Outcome {
    let opts = OracleOptions::default();
    // 2-node graph, W_u = W_s = W_m = 1, x = (1, 2). Connected, every
    // GCN coefficient is 1/2: h_0 = 1 + (1 + 2)/2 = 2.5, h_1 = 2 + 3/2 = 3.5.
    // Alone, the self coefficient is 1: h_0 = 2, h_1 = 4.
    let two = GnnModel::from_layers(
        LayerKind::Gcn,
        Task::NodeClassification,
        vec![scalar_layer(Some(1.0), Some(1.0))],
        Head::Identity,
    )
    .map_err(e2s)?;
    let g = scalar_graph(2, &[(0, 1)], &[1.0, 2.0]);
    let s = oracle_node(&two, &g, &opts).map_err(e2s)?.scores;
    let mut worst = (s[0] - 0.5).abs().max((s[1] - 0.5).abs());

    // star 0-{1,2,3}, W_m = 1 only, x = (1, 2, 3, 4). Degrees 3,1,1,1.
    let star = GnnModel::from_layers(
        LayerKind::Gcn,
        Task::NodeClassification,
        vec![scalar_layer(None, None)],
        Head::Identity,
    )
    .map_err(e2s)?;
    let g = scalar_graph(4, &[(0, 1), (0, 2), (0, 3)], &[1.0, 2.0, 3.0, 4.0]);
    let s = oracle_node(&star, &g, &opts).map_err(e2s)?.scores;
    // removing the center: leaf j goes from x_j/2 + 1/√8 to x_j
    let r8 = 8f64.sqrt();
    let center = (1.0 - 1.0 / r8) + (1.5 - 1.0 / r8) + (2.0 - 1.0 / r8);
    // removing leaf 1: center degree 3 → 2
    let r6 = 6f64.sqrt();
    let c_before = 0.25 + 9.0 / r8;
    let c_after = 1.0 / 3.0 + 7.0 / r6;
    let leaf1 = (c_before - c_after).abs() + 2.0 * (1.0 / r6 - 1.0 / r8);
    worst = worst.max((s[0] - center).abs()).max((s[1] - leaf1).abs());
    ensure(worst < 1e-9, format!("hand values off by {worst:.2e}"))?;

    // isolated node, every kind, both tasks
    for kind in KINDS {
        let base = er(30, 0.1, 6, 1);
        let mut edges = base.edges();
        edges.retain(|&(a, b)| a != 29 && b != 29);
        let g = base.with_edges(&edges).map_err(e2s)?;
        let node = small_model(kind, Task::NodeClassification, 6, 4);
        let s = oracle_node(&node, &g, &opts).map_err(e2s)?.scores;
        ensure(s[29] == 0.0, format!("{kind} node: isolated score {}", s[29]))?;
        let link = small_model(kind, Task::LinkPrediction, 6, 4);
        let pairs: Vec<_> = (0..10).map(|i| (i, i + 10)).collect();
        let s = oracle_link(&link, &g, &pairs, &opts).map_err(e2s)?.scores;
        ensure(s[29] == 0.0, format!("{kind} link: isolated score {}", s[29]))?;
    }

    // parallel == serial bitwise
    let par = OracleOptions {
        workers: 4,
        ..OracleOptions::default()
    };
    for kind in KINDS {
        let g = ba(80, 3);
        let node = small_model(kind, Task::NodeClassification, 8, 12);
        let a = oracle_node(&node, &g, &opts).map_err(e2s)?.scores;
        let b = oracle_node(&node, &g, &par).map_err(e2s)?.scores;
        ensure(bits(&a) == bits(&b), format!("{kind} node: parallel differs from serial"))?;
        let link = small_model(kind, Task::LinkPrediction, 8, 12);
        let pairs: Vec<_> = (0..40).map(|i| (i, 79 - i)).collect();
        let a = oracle_link(&link, &g, &pairs, &opts).map_err(e2s)?.scores;
        let b = oracle_link(&link, &g, &pairs, &par).map_err(e2s)?.scores;
        ensure(bits(&a) == bits(&b), format!("{kind} link: parallel differs from serial"))?;
    }
    Ok(format!("hand values within {worst:.1e}, isolated = 0, parallel == serial"))
}

// ---------------------------------------------------------------- Cora runs

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn tmp() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
}

fn cora_config(task: Task, kind: LayerKind, hidden: usize, methods: Vec<Method>, cycles: Vec<usize>) -> PipelineConfig {
    PipelineConfig {
        dataset: DatasetSource::Path(workspace_root().join("data/cora")),
        task,
        model: ModelSpec {
            kind,
            hidden,
            num_layers: 2,
        },
        methods,
        train: Default::default(),
        cycles,
        seed: 0,
        workers: 1,
        tune_fraction: 0.1,
        nora_grid: None,
        mask_grid: None,
        predict: PredictConfig::default(),
    }
}

struct Run {
    outcome: PipelineOutcome,
    secs: f64,
    out_dir: PathBuf,
}

fn run(name: &str, cfg: &PipelineConfig) -> Result<Run, String> {
    let out_dir = tmp().join("acceptance").join(name);
    let start = Instant::now();
    let outcome = run_pipeline(cfg, &out_dir, &tmp().join("acceptance-cache")).map_err(e2s)?;
    Ok(Run {
        outcome,
        secs: start.elapsed().as_secs_f64(),
        out_dir,
    })
}

fn cached_run(cell: &'static OnceLock<Result<Run, String>>, name: &str, cfg: impl FnOnce() -> PipelineConfig) -> Result<&'static Run, String> {
    cell.get_or_init(|| run(name, &cfg())).as_ref().map_err(Clone::clone)
}

const NORA_METHODS: [Method; 3] = [Method::Nora, Method::NoraT1, Method::NoraT2];

fn node_run() -> Result<&'static Run, String> {
    static CELL: OnceLock<Result<Run, String>> = OnceLock::new();
    cached_run(&CELL, "node", || {
        cora_config(Task::NodeClassification, LayerKind::Gcn, 64, NORA_METHODS.to_vec(), (0..5).collect())
    })
}

fn link_run() -> Result<&'static Run, String> {
    static CELL: OnceLock<Result<Run, String>> = OnceLock::new();
    cached_run(&CELL, "link", || {
        cora_config(Task::LinkPrediction, LayerKind::Gcn, 64, NORA_METHODS.to_vec(), (0..5).collect())
    })
}

/// Cached-run note: on reruns models and oracles come from the cache.
fn fresh_note(run: &Run) -> &'static str {
    if run.outcome.manifest.stages.iter().any(|s| s.cached) {
        " (cached artifacts)"
    } else {
        ""
    }
}

fn c4_fidelity() -> Outcome {
    let mut parts = Vec::new();
    for (name, run, bound) in [("node", node_run()?, 0.80), ("link", link_run()?, 0.85)] {
        let summary = run
            .outcome
            .report
            .summaries
            .iter()
            .find(|s| s.method == "nora")
            .ok_or("missing nora summary")?;
        let per_cycle: Vec<String> = summary.runs.iter().map(|r| format!("{:.3}", r.pearson)).collect();
        ensure(summary.runs.len() == 5, format!("{name}: {} of 5 cycles evaluated", summary.runs.len()))?;
        let r = summary.mean_pearson;
        ensure(r >= bound, format!("{name}: mean Pearson {r:.4} < {bound}"))?;
        ensure(run.secs < 1800.0, format!("{name}: took {:.0} s", run.secs))?;
        parts.push(format!(
            "{name} {r:.4} >= {bound} [{}] in {:.0} s{}",
            per_cycle.join(" "),
            run.secs,
            fresh_note(run)
        ));
    }
    Ok(parts.join("; "))
}

fn mean_tune_pearson(run: &Run, method: Method) -> Result<f64, String> {
    let vals: Vec<f64> = run
        .outcome
        .report
        .outcomes
        .iter()
        .filter(|o| o.method == method)
        .map(|o| o.settings["tune_pearson"].as_f64().ok_or("missing tune_pearson"))
        .collect::<Result<_, _>>()?;
    ensure(!vals.is_empty(), format!("no {} runs", method.name()))?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

fn c5_ablation() -> Outcome {
    let mut parts = Vec::new();
    for (name, run) in [("node", node_run()?), ("link", link_run()?)] {
        let full = mean_tune_pearson(run, Method::Nora)?;
        let t1 = mean_tune_pearson(run, Method::NoraT1)?;
        let t2 = mean_tune_pearson(run, Method::NoraT2)?;
        ensure(
            full >= t1.max(t2) - 0.02,
            format!("{name}: full {full:.4} vs t1 {t1:.4} t2 {t2:.4}"),
        )?;
        parts.push(format!("{name} full {full:.3} t1 {t1:.3} t2 {t2:.3}"));
    }
    Ok(parts.join("; "))
}

fn c6_baselines() -> Outcome {
    let cfg = cora_config(Task::NodeClassification, LayerKind::Gcn, 64, vec![Method::Mask], vec![0]);
    let mask = run("mask", &cfg)?;
    let r = mask
        .outcome
        .report
        .mean_pearson(Method::Mask)
        .ok_or("mask correlation undefined")?;
    ensure(r >= 0.5, format!("mask Pearson {r:.4} < 0.5"))?;

    let node = node_run()?;
    let oracle = read_scores(&node.out_dir.join("cycle0/oracle.csv")).map_err(e2s)?;
    let graph = nie_core::load_dataset(&workspace_root().join("data/cora")).map_err(e2s)?.0;
    let fractions = [0.1, 0.2, 0.3];
    let reports = label_sweep("predict-e", &oracle, &fractions, 0, |train, valid| {
        let (tv, vv) = (pick(&oracle, train), pick(&oracle, valid));
        let run = predict_scores(
            &graph,
            PredictKind::Edge,
            Validation { ids: train, values: &tv },
            Validation { ids: valid, values: &vv },
            &PredictConfig::default(),
        )?;
        Ok(run.scores)
    })
    .map_err(e2s)?;
    let sweep: Vec<f64> = reports.iter().map(|r| r.pearson).collect();
    for w in sweep.windows(2) {
        ensure(w[1] >= w[0] - 0.05, format!("predict-e sweep drops: {sweep:.3?}"))?;
    }
    Ok(format!("mask {r:.3} >= 0.5; predict-e 10/20/30% {sweep:.3?}"))
}

// ---------------------------------------------------------------- 7

fn c7_speed() -> Outcome {
    let rep = run_bench(&BenchConfig::default()).map_err(e2s)?;
    let dir = tmp().join("acceptance");
    std::fs::create_dir_all(&dir).map_err(e2s)?;
    std::fs::write(dir.join("bench.md"), rep.to_markdown()).map_err(e2s)?;
    let o = rep.time(LayerKind::Gcn, "oracle", 2000).ok_or("missing oracle cell")?;
    let f = rep.time(LayerKind::Gcn, "nora", 2000).ok_or("missing nora cell")?;
    let fit = rep.fits.iter().find(|f| f.kind == LayerKind::Gcn).ok_or("missing fit")?;
    let ratio = f / o;
    ensure(ratio <= 1.0 / 50.0, format!("ratio at N=2000 is 1/{:.0}", 1.0 / ratio))?;
    ensure(fit.gap >= 0.7, format!("slope gap {:.3}", fit.gap))?;
    Ok(format!(
        "N=2000 oracle {o:.3} s, nora {f:.4} s (1/{:.0}); slopes {:.2} vs {:.2}, gap {:.2}",
        1.0 / ratio,
        fit.oracle_slope,
        fit.nora_slope,
        fit.gap
    ))
}

// ---------------------------------------------------------------- 8

fn oracle_for(kind: LayerKind, hidden: usize) -> Result<StabilityEntry, String> {
    let name = format!("stability-{kind}-{hidden}");
    let cfg = cora_config(Task::NodeClassification, kind, hidden, vec![Method::Nora], vec![0]);
    let run = run(&name, &cfg)?;
    Ok(StabilityEntry {
        kind: kind.to_string(),
        hidden,
        scores: read_scores(&run.out_dir.join("cycle0/oracle.csv")).map_err(e2s)?,
    })
}

fn c8_stability() -> Outcome {
    let gcn: Vec<StabilityEntry> = [128, 256, 512]
        .into_iter()
        .map(|h| oracle_for(LayerKind::Gcn, h))
        .collect::<Result<_, _>>()?;
    let intra = stability_analysis(&gcn).map_err(e2s)?;
    let models = vec![
        gcn[0].clone(),
        oracle_for(LayerKind::SageMean, 128)?,
        oracle_for(LayerKind::Gat1, 128)?,
    ];
    let inter = stability_analysis(&models).map_err(e2s)?;
    let intra_mean = intra.intra_mean.ok_or("no intra pairs")?;
    let inter_mean = inter.inter_mean.ok_or("no inter pairs")?;
    ensure(intra_mean >= 0.95, format!("hidden-size mean {intra_mean:.4} < 0.95"))?;
    ensure(inter_mean >= 0.7, format!("inter-model mean {inter_mean:.4} < 0.7"))?;
    Ok(format!("hidden sizes {intra_mean:.4} >= 0.95; gcn/sage/gat {inter_mean:.4} >= 0.7"))
}

// ---------------------------------------------------------------- 9

fn c9_concentration() -> Outcome {
    let node = node_run()?;
    let oracle = read_scores(&node.out_dir.join("cycle0/oracle.csv")).map_err(e2s)?;
    let share = concentration(&oracle, &[1.0, 3.0, 10.0]).map_err(e2s)?;
    let (s1, s3, s10) = (share[0], share[1], share[2]);
    ensure(s10 > s3 && s3 > s1, format!("shares not ordered: {share:.3?}"))?;
    ensure(s1 > 0.01 && s3 > 0.03 && s10 > 0.10, format!("shares not above uniform: {share:.3?}"))?;
    let reference = [0.1478, 0.2495, 0.4514];
    for (s, r) in share.iter().zip(reference) {
        ensure((s - r).abs() <= 0.15, format!("share {s:.3} more than 15 points from {r}"))?;
    }
    Ok(format!(
        "top 1/3/10% hold {:.1}/{:.1}/{:.1}% (reference 14.8/25.0/45.1)",
        100.0 * s1,
        100.0 * s3,
        100.0 * s10
    ))
}

// ---------------------------------------------------------------- 10

fn nora_all(model: &GnnModel, g: &Graph) -> Vec<f64> {
    NoraEngine::new(model, g, None)
        .unwrap()
        .scores(&NoraConfig::default(), NoraMode::Full)
        .unwrap()
}

fn prop_permutation() -> Result<(), String> {
    let g = ba(25, 4);
    let mut perm: Vec<usize> = (0..25).collect();
    perm.reverse();
    perm.swap(3, 17);
    let pg = g.permuted(&perm).map_err(e2s)?;
    for kind in KINDS {
        let model = small_model(kind, Task::NodeClassification, 8, 9);
        let a = model_forward(&model, &g, None).map_err(e2s)?;
        let b = model_forward(&model, &pg, None).map_err(e2s)?;
        let na = nora_all(&model, &g);
        let nb = nora_all(&model, &pg);
        for (i, &p) in perm.iter().enumerate() {
            for (x, y) in a.output().row(i).iter().zip(b.output().row(p)) {
                ensure((x - y).abs() < 1e-12, format!("{kind}: forward not equivariant at {i}"))?;
            }
            ensure((na[i] - nb[p]).abs() < 1e-9, format!("{kind}: nora not equivariant at {i}"))?;
        }
        let cfg = NoraConfig::default();
        let (ta, tb) = (topo_delta(&g, &cfg).map_err(e2s)?, topo_delta(&pg, &cfg).map_err(e2s)?);
        for (i, &p) in perm.iter().enumerate() {
            ensure((ta[i] - tb[p]).abs() < 1e-12, "topology term not equivariant")?;
        }
    }
    Ok(())
}

fn prop_locality() -> Result<(), String> {
    // GCN coefficients depend on both endpoint degrees, so a removal
    // reaches one hop further than the layer count
    for (kind, safe) in [(LayerKind::Gcn, 4), (LayerKind::SageMean, 3), (LayerKind::Gat1, 3)] {
        let g = er(60, 0.05, 8, 11);
        let model = small_model(kind, Task::NodeClassification, 8, 1);
        let base = model_forward(&model, &g, None).map_err(e2s)?;
        let mut checked = 0;
        for r in [0, 7, 23] {
            let after = model_forward(&model, &remove_node(&g, r).map_err(e2s)?, None).map_err(e2s)?;
            let dist = g.hop_distances(r);
            for i in (0..60).filter(|&i| dist[i] >= safe) {
                ensure(base.output().row(i) == after.output().row(i), format!("{kind}: node {i} moved"))?;
                checked += 1;
            }
        }
        ensure(checked > 0, "no distant nodes to check")?;
    }
    Ok(())
}

fn deltas_sum_norm(model: &GnnModel, g: &Graph, r: usize) -> Result<f64, String> {
    let base = model_forward(model, g, None).map_err(e2s)?;
    let after = model_forward(model, &remove_node(g, r).map_err(e2s)?, None).map_err(e2s)?;
    let c = base.output().cols();
    let mut sum = vec![0.0; c];
    for i in (0..g.num_nodes()).filter(|&i| i != r) {
        for (k, s) in sum.iter_mut().enumerate() {
            *s += base.output().get(i, k) - after.output().get(i, k);
        }
    }
    Ok(sum.iter().map(|v| v.abs()).sum())
}

fn prop_subadditivity() -> Result<(), String> {
    let g = ba(40, 3);
    let model = small_model(LayerKind::Gcn, Task::NodeClassification, 8, 12);
    let s = oracle_node(&model, &g, &OracleOptions::default()).map_err(e2s)?.scores;
    for (r, &score) in s.iter().enumerate() {
        ensure(deltas_sum_norm(&model, &g, r)? <= score + 1e-12, format!("bound fails at {r}"))?;
    }
    // star where the center pulls every leaf toward class 1: all deltas
    // share signs per class, so the bound is tight
    let n = 6;
    let mut feats = vec![0.0; 2 * n];
    feats[1] = 1.0;
    for i in 1..n {
        feats[2 * i] = 1.0;
    }
    let edges: Vec<_> = (1..n).map(|i| (0, i)).collect();
    let g = Graph::from_edges(n, &edges, Tensor::from_vec(n, 2, feats).unwrap(), None)
        .map_err(e2s)?
        .0;
    let layer = GnnLayer {
        kind: LayerKind::SageMean,
        activation: Activation::None,
        w_m: Arc::new(Tensor::from_vec(2, 2, vec![3.0, 0.0, 0.0, 3.0]).unwrap()),
        w_s: None,
        w_u: None,
        bias: None,
        att_src: None,
        att_dst: None,
    };
    let model = GnnModel::from_layers(LayerKind::SageMean, Task::NodeClassification, vec![layer], Head::Softmax)
        .map_err(e2s)?;
    let s = oracle_node(&model, &g, &OracleOptions::default()).map_err(e2s)?.scores;
    for (r, &score) in s.iter().enumerate() {
        ensure((deltas_sum_norm(&model, &g, r)? - score).abs() < 1e-12, format!("equality fails at {r}"))?;
    }
    ensure(s[0] > 0.0, "center has no influence")
}

fn prop_pearson_affine() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.random_range(3..50);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let a = rng.random_range(0.1..10.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let b = rng.random_range(-100.0..100.0);
        let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let r = pearson(&x, &y).map_err(e2s)?;
        let r2 = pearson(&ax, &y).map_err(e2s)?;
        ensure((r2 - a.signum() * r).abs() < 1e-9, format!("pearson {r} vs {r2} under a={a}"))?;
    }
    Ok(())
}

fn prop_mask_projection() -> Result<(), String> {
    let g = ba(40, 2);
    for kind in KINDS {
        for (lr, alpha, beta) in [(5.0, 0.0, 0.0), (5.0, 10.0, 0.0), (5.0, 0.0, 10.0), (0.01, 0.2, 0.1)] {
            let model = small_model(kind, Task::NodeClassification, 8, 3);
            let cfg = MaskConfig {
                lr,
                alpha_reg: alpha,
                beta_reg: beta,
                epochs: 20,
            };
            let run = optimize_mask(&model, &g, &cfg, None, None).map_err(e2s)?;
            ensure(
                run.mask.iter().all(|m| (0.0..=1.0).contains(m)),
                format!("{kind}: mask left [0, 1] at lr {lr}"),
            )?;
            if alpha == 10.0 {
                ensure(run.health == MaskHealth::Collapsed, format!("{kind}: collapse not flagged"))?;
            }
        }
    }
    Ok(())
}

fn prop_damping_and_topo() -> Result<(), String> {
    let star = generate_synthetic(SynthKind::Star, &SynthParams::new(30), 0).map_err(e2s)?;
    let graphs = [ba(50, 1), er(50, 0.1, 8, 2), star];
    for g in &graphs {
        for beta in [1e-3, 0.5, 1.0, 5.0] {
            let d = damping(g.degrees(), g.mean_degree(), beta);
            ensure(d.iter().all(|&v| v > 0.0 && v <= 1.0), format!("damping outside (0, 1] at beta {beta}"))?;
            for &v in &d {
                // powers of a value in (0, 1] never increase
                ensure(v.powi(2) <= v && v.powi(3) <= v.powi(2), "damping powers increase")?;
            }
        }
        for cfg in default_grid() {
            let t = topo_delta(g, &cfg).map_err(e2s)?;
            ensure(t.iter().all(|&v| v >= 0.0), "negative topology term")?;
        }
    }
    Ok(())
}

fn prop_nora_cost_and_symmetry() -> Result<(), String> {
    let g = ba(60, 7);
    for kind in KINDS {
        let model = small_model(kind, Task::NodeClassification, 8, 2);
        let before = counters::snapshot();
        nora_all(&model, &g);
        let used = counters::snapshot().since(before);
        ensure(
            used.forwards == 1 && used.backwards == 1,
            format!("{kind}: {} forwards, {} backwards", used.forwards, used.backwards),
        )?;
    }
    // cycle graph with identical features: every node looks the same
    let n = 12;
    let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    let g = Graph::from_edges(n, &edges, Tensor::filled(n, 8, 0.3), None).map_err(e2s)?.0;
    for kind in KINDS {
        let s = nora_all(&small_model(kind, Task::NodeClassification, 8, 5), &g);
        ensure(s.iter().all(|v| (v - s[0]).abs() < 1e-9), format!("{kind}: unequal scores on a cycle"))?;
    }
    Ok(())
}

fn c10_properties() -> Outcome {
    let props: [(&str, Property); 7] = [
        ("permutation equivariance", prop_permutation),
        ("locality", prop_locality),
        ("aggregate change bound and equality", prop_subadditivity),
        ("pearson affine invariance", prop_pearson_affine),
        ("mask projection", prop_mask_projection),
        ("damping range and topology term sign", prop_damping_and_topo),
        ("nora cost and symmetric graphs", prop_nora_cost_and_symmetry),
    ];
    for (name, f) in props {
        f().map_err(|e| format!("{name}: {e}"))?;
    }
    Ok(format!("{} property groups", props.len()))
}

// ---------------------------------------------------------------- main

fn main() {
    let criteria: [(usize, &str, Check); 10] = [
        (1, "gradient correctness", c1_gradients),
        (2, "linear layer jacobian", c2_jacobian),
        (3, "oracle exactness", c3_oracle),
        (4, "nora fidelity on cora", c4_fidelity),
        (5, "ablation ordering", c5_ablation),
        (6, "baseline sanity", c6_baselines),
        (7, "speed contract", c7_speed),
        (8, "stability", c8_stability),
        (9, "concentration", c9_concentration),
        (10, "property suites", c10_properties),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
