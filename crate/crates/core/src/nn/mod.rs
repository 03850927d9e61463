//! Dense tensors, a reverse-mode tape, and optimizers.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod param;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, Var};
pub use optim::{OptimizerConfig, OptimizerKind};
pub use param::{Group, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
