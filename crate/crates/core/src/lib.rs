//! Continual test-time adaptation of a two-layer GCN over a drifting
//! sequence of graphs, with replay from generated memory graphs.
//!
//! The crate is built bottom-up:
//!
//! * [`autodiff`] is a small reverse-mode engine whose gradients are
//!   themselves differentiable, which the generator's gradient-matching
//!   objective needs.
//! * [`graph`], [`backbone`] and [`adaptation`] cover the classifier and the
//!   unsupervised adaptation step.
//! * [`memory`] trains the variational memory-graph generator.
//! * [`trainer`] runs the per-domain loop and [`metrics`] scores it.
//! * [`io`] reads datasets and writes run directories.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod graph;
pub mod io;
pub mod memory;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use adaptation::{adapt_domain, amr_loss, im_loss, AdaptConfig};
pub use autodiff::{Mat, Var};
pub use backbone::{gcn_forward, ema_update, sgd_step, ForwardOutput, GraphInput, ModelParams, ParamGrads};
pub use error::{Error, Result};
pub use graph::{
    normalized_adjacency, synth_drift_sequence, validate_graph, DriftSpec, Graph, GraphSequence, ValidationReport,
    Violation, ViolationCode,
};
pub use io::{load_dataset, save_dataset, write_report, write_run, Report, RunConfig};
pub use memory::{
    gen_loss, generate_memory, grad_distance, mgl_loss, reg_loss, train_generator, GenConfig, GeneratorParams,
    LatentSelection, MemoryGraph, TrainTrace,
};
pub use metrics::{average_forgetting, average_performance, domain_score, Metric, PerformanceMatrix};
pub use trainer::{pretrain, run_continual, ContinualConfig, MemoryPool, RunState};
