//! Minimal float64 reverse-mode differentiation: a recording tape, named
//! parameter storage with freezing, SGD/Adam and finite-difference checks.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckReport, GRADCHECK_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{ParamEntry, ParamStore, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use tensor::Tensor;

