// Negated comparisons like `!(x > 0.0)` are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod bench;
pub mod counters;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod graph;
pub mod nora;
pub mod oracle;
pub mod pipeline;
pub mod scores;
pub mod tensor;

pub use autodiff::{AggPlan, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use graph::{
    cycle_split, generate_synthetic, load_dataset, remove_node, write_dataset, Graph, NodeRole,
    RemovalView, SplitSpec, SynthKind, SynthParams, Task, Topology,
};
pub use tensor::Tensor;
