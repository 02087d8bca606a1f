//! Tensor-level building blocks: the differentiation tape, parameters,
//! initialisation and optimisers.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use graph::{Gradients, Graph, Var};
pub use layers::{time_embed, time_embed_batch};
pub use optim::{sgd_step, Adam};
pub use params::{ParamEntry, ParamSet};
