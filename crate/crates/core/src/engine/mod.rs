//! Minimal dense reverse-mode autodiff and the two optimizers used for
//! training.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod param;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, RoundingPass, Var};
pub use optim::{AdamConfig, OptimizerKind, OptimizerState, SgdConfig};
pub use param::{Param, ParamGroup, ParamId, ParamStore};
