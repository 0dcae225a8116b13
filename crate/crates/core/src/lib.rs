//! Entropy-routed disentangled training with main/auxiliary batch
//! normalization, its baselines, and a corruption-robustness evaluation
//! harness, built on a small reverse-mode autodiff engine.

pub mod attack;
pub mod augment;
pub mod checkpoint;
pub mod corrupt;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod frechet;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod norm;
pub mod optim;
pub mod real;
pub mod rng;
pub mod selection;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use model::{ForwardOpts, Model, ModelKind, ModelSpec};
pub use norm::{Mode, Route};
pub use real::{Precision, Real};
pub use tensor::Tensor;
