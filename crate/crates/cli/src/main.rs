use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nie_core::baselines::{
    default_mask_grid, optimize_mask, predict_scores, tune_mask, PredictConfig, PredictKind,
    Validation,
};
use nie_core::bench::{run_bench, BenchConfig};
use nie_core::eval::{derive_seed, evaluate_method, EvalSubset};
use nie_core::gnn::{train, GnnModel, LayerKind, ModelConfig, TrainConfig};
use nie_core::nora::{default_grid, tune_nora, NoraConfig, NoraEngine, NoraMode};
use nie_core::oracle::{oracle_link, oracle_node, OracleOptions};
use nie_core::pipeline::{run_pipeline, PipelineConfig};
use nie_core::scores::{read_score_rows, read_scores, write_scores};
use nie_core::{
    cycle_split, generate_synthetic, load_dataset, write_dataset, Error, Graph, Result, SplitSpec,
    SynthKind, SynthParams, Task, Topology,
};

#[derive(Parser)]
#[command(name = "nie", version, about = "Node influence estimation for graph neural networks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Seed for splits, initialization and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for the brute-force oracle.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Cache for trained models and oracle scores.
    #[arg(long, global = true, env = "NIE_CACHE_DIR", default_value = ".nie-cache")]
    cache_dir: PathBuf,
}

/// Dataset, model and split cycle shared by the scoring commands.
#[derive(Args)]
struct ModelArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Trained model checkpoint (JSON).
    #[arg(long, visible_alias = "checkpoint")]
    model: PathBuf,
    /// Split cycle the model was trained on (decides link message edges).
    #[arg(long, visible_alias = "split-cycle", default_value_t = 0)]
    cycle: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long, default_value = "erdos-renyi")]
        kind: SynthKind,
        #[arg(long)]
        n: usize,
        /// Edge probability (Erdős–Rényi).
        #[arg(long, default_value_t = 0.0)]
        p: f64,
        /// Mean degree; sets the Erdős–Rényi edge probability.
        #[arg(long, conflicts_with = "p")]
        mean_degree: Option<f64>,
        /// Edges per new node (Barabási–Albert).
        #[arg(long, default_value_t = 1)]
        m: usize,
        #[arg(long, default_value_t = 8)]
        features: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value = "node")]
        task: Task,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and save its checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "node")]
        task: Task,
        #[arg(long, visible_alias = "model", default_value = "gcn")]
        kind: LayerKind,
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0.2)]
        lr: f64,
        #[arg(long, visible_alias = "split-cycle", default_value_t = 0)]
        cycle: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact influence of every node by removal and re-inference.
    Oracle {
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        /// Partial results file for resuming interrupted runs.
        #[arg(long)]
        progress_file: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 256)]
        checkpoint_every: usize,
    },
    /// Gradient-based approximation of every node's influence.
    Nora {
        #[command(flatten)]
        m: ModelArgs,
        /// Oracle scores for the tuning nodes (`node_id,score`).
        #[arg(long, visible_alias = "tune")]
        labels: Option<PathBuf>,
        /// Fixed settings (JSON) used instead of tuning.
        #[arg(long, conflicts_with = "labels")]
        config: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        mode: NoraMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Node-mask optimization baseline.
    Mask {
        #[command(flatten)]
        m: ModelArgs,
        /// Oracle scores for the validation nodes (`node_id,score`).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Influence regression baselines (Predict-N, Predict-E).
    PredictBaseline {
        #[arg(long)]
        data: PathBuf,
        /// `n` (node regression) or `e` (edge embeddings).
        #[arg(long, default_value = "e")]
        kind: PredictKind,
        /// Oracle scores for the labeled nodes, split 7:3 into train/validation.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pearson and Spearman of a method against the oracle on held-out nodes.
    Eval {
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        method: PathBuf,
        /// Seed of the tuning/test subset draw.
        #[arg(long)]
        split_seed: Option<u64>,
        /// Saved subset (JSON); takes precedence over --split-seed.
        #[arg(long)]
        subset: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        tune_fraction: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runtime scaling of the oracle against NORA on Erdős–Rényi graphs.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "500,1000,2000,4000")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "gcn")]
        models: Vec<LayerKind>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// CSV output; a markdown table is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a JSON-configured experiment end to end.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

/// Graph the model runs on plus the link evaluation pairs.
struct Context {
    graph: Graph,
    eval_edges: Vec<(usize, usize)>,
}

impl Context {
    fn load(args: &ModelArgs, seed: u64) -> Result<(GnnModel, Context)> {
        let (graph, _) = load_dataset(&args.data)?;
        let model = GnnModel::load(&args.model)?;
        if args.cycle >= nie_core::graph::NUM_CYCLES {
            return Err(Error::InvalidParam(format!("cycle {} out of range", args.cycle)));
        }
        let ctx = match model.task() {
            Task::NodeClassification => Context {
                graph,
                eval_edges: Vec::new(),
            },
            Task::LinkPrediction => {
                let split = cycle_split(&SplitSpec::new(&graph, Task::LinkPrediction, seed)?, args.cycle);
                Context {
                    eval_edges: split.eval_edges(),
                    graph: split.message_graph(&graph)?.into_owned(),
                }
            }
        };
        Ok((model, ctx))
    }

    fn edges(&self) -> Option<&[(usize, usize)]> {
        (!self.eval_edges.is_empty()).then_some(&self.eval_edges[..])
    }
}

fn read_labels(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    Ok(read_score_rows(path)?.into_iter().unzip())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    std::fs::write(path, body).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    match cli.cmd {
        Cmd::Synth {
            kind,
            n,
            p,
            mean_degree,
            m,
            features,
            classes,
            task,
            out,
        } => {
            let mut params = SynthParams::new(n);
            params.p = match mean_degree {
                Some(d) if n > 1 => (d / (n - 1) as f64).min(1.0),
                _ => p,
            };
            params.m = m;
            params.num_features = features;
            params.num_classes = classes;
            let graph = generate_synthetic(kind, &params, g.seed)?;
            write_dataset(&graph, &task.to_string(), &out)?;
            println!("{} nodes, {} edges -> {}", graph.num_nodes(), graph.num_edges(), out.display());
        }
        Cmd::Train {
            data,
            task,
            kind,
            hidden,
            layers,
            epochs,
            lr,
            cycle,
            out,
        } => {
            let (graph, _) = load_dataset(&data)?;
            if cycle >= nie_core::graph::NUM_CYCLES {
                return Err(Error::InvalidParam(format!("cycle {cycle} out of range")));
            }
            let split = cycle_split(&SplitSpec::new(&graph, task, g.seed)?, cycle);
            let out_dim = match task {
                Task::NodeClassification => graph.num_classes(),
                Task::LinkPrediction => hidden,
            };
            let cfg = ModelConfig {
                kind,
                task,
                in_dim: graph.num_features(),
                hidden,
                out_dim,
                num_layers: layers,
            };
            let mut model = GnnModel::new(cfg, g.seed)?;
            let tc = TrainConfig {
                epochs,
                lr,
                seed: g.seed,
                ..TrainConfig::default()
            };
            let report = train(&mut model, &graph, &split, &tc)?;
            model.save(&out)?;
            let metric = match task {
                Task::NodeClassification => "accuracy",
                Task::LinkPrediction => "auc",
            };
            println!(
                "best epoch {}, test {metric} {:.4} -> {}",
                report.best_epoch,
                report.test_metric,
                out.display()
            );
        }
        Cmd::Oracle {
            m,
            out,
            progress_file,
            resume,
            checkpoint_every,
        } => {
            let (model, ctx) = Context::load(&m, g.seed)?;
            let opts = OracleOptions {
                workers: g.workers,
                progress_file,
                resume,
                checkpoint_every,
                candidates: None,
            };
            let s = match model.task() {
                Task::NodeClassification => oracle_node(&model, &ctx.graph, &opts)?,
                Task::LinkPrediction => oracle_link(&model, &ctx.graph, &ctx.eval_edges, &opts)?,
            };
            write_scores(&out, &s.scores)?;
            println!("{} scores in {:.2}s -> {}", s.len(), s.wall_time_secs, out.display());
        }
        Cmd::Nora {
            m,
            labels,
            config,
            mode,
            out,
        } => {
            let (model, ctx) = Context::load(&m, g.seed)?;
            let mut engine = NoraEngine::new(&model, &ctx.graph, ctx.edges())?;
            let cfg = match (labels, config) {
                (Some(path), _) => {
                    let (ids, values) = read_labels(&path)?;
                    let t = tune_nora(&mut engine, &ids, &values, &default_grid(), mode)?;
                    println!("tuned on {} labels: pearson {:.4}", ids.len(), t.pearson);
                    t.config
                }
                (None, Some(path)) => {
                    let body = std::fs::read_to_string(&path).map_err(|source| Error::Io { path, source })?;
                    serde_json::from_str(&body)?
                }
                (None, None) => NoraConfig::default(),
            };
            let scores = engine.scores(&cfg, mode)?;
            write_scores(&out, &scores)?;
            write_json(&out.with_extension("config.json"), &cfg)?;
            println!("{} scores -> {}", scores.len(), out.display());
        }
        Cmd::Mask { m, labels, out } => {
            let (model, ctx) = Context::load(&m, g.seed)?;
            let run = match labels {
                Some(path) => {
                    let (ids, values) = read_labels(&path)?;
                    let val = Validation {
                        ids: &ids,
                        values: &values,
                    };
                    tune_mask(&model, &ctx.graph, &default_mask_grid(), ctx.edges(), val)?
                }
                None => optimize_mask(&model, &ctx.graph, &Default::default(), ctx.edges(), None)?,
            };
            write_scores(&out, &run.scores)?;
            println!(
                "mask {:?} at epoch {} ({:?}) -> {}",
                run.config,
                run.best_epoch,
                run.health,
                out.display()
            );
        }
        Cmd::PredictBaseline {
            data,
            kind,
            labels,
            epochs,
            out,
        } => {
            let (graph, _) = load_dataset(&data)?;
            let (ids, values) = read_labels(&labels)?;
            let k = (ids.len() * 7).div_ceil(10);
            let train = Validation {
                ids: &ids[..k],
                values: &values[..k],
            };
            let valid = Validation {
                ids: &ids[k..],
                values: &values[k..],
            };
            let cfg = PredictConfig {
                epochs,
                seed: g.seed,
                ..PredictConfig::default()
            };
            let run = predict_scores(&graph, kind, train, valid, &cfg)?;
            write_scores(&out, &run.scores)?;
            println!("best epoch {} -> {}", run.best_epoch, out.display());
        }
        Cmd::Eval {
            oracle,
            method,
            split_seed,
            subset,
            tune_fraction,
            out,
        } => {
            let o = read_scores(&oracle)?;
            let s = read_scores(&method)?;
            let subset = match subset {
                Some(path) => EvalSubset::load(&path)?,
                None => {
                    let seed = split_seed.unwrap_or_else(|| derive_seed(&[&g.seed.to_string()]));
                    EvalSubset::draw(o.len(), tune_fraction, seed)?
                }
            };
            let name = method.file_stem().map_or("method".into(), |s| s.to_string_lossy().into_owned());
            let report = evaluate_method(&name, &s, &o, &subset, 0)?;
            println!(
                "{name}: pearson {:.4}, spearman {:.4} on {} held-out nodes",
                report.pearson, report.spearman, report.test_size
            );
            if let Some(out) = out {
                write_json(&out, &serde_json::json!({"report": report, "subset": subset}))?;
            }
        }
        Cmd::Bench {
            sizes,
            models,
            reps,
            out,
        } => {
            let cfg = BenchConfig {
                sizes,
                kinds: models,
                reps,
                seed: g.seed,
                ..BenchConfig::default()
            };
            let report = run_bench(&cfg)?;
            let io = |path: &Path, body: String| {
                std::fs::write(path, body).map_err(|source| Error::Io {
                    path: path.to_path_buf(),
                    source,
                })
            };
            io(&out, report.to_csv())?;
            io(&out.with_extension("md"), report.to_markdown())?;
            print!("{}", report.to_markdown());
        }
        Cmd::Pipeline { config, out } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if g.workers > 1 {
                cfg.workers = g.workers;
            }
            let outcome = run_pipeline(&cfg, &out, &g.cache_dir)?;
            for s in &outcome.report.summaries {
                println!("{}: mean pearson {:.4} over {} cycle(s)", s.method, s.mean_pearson, s.runs.len());
            }
            println!("manifest -> {}", outcome.manifest_path.display());
        }
    }
    Ok(())
}
