//! Dense-tensor engine with reverse-mode automatic differentiation.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod param;

pub use gradcheck::{finite_diff_check, GradCheckReport, LossBuilder, VariableLoss};
pub use graph::{FeatureTaps, Graph, NodeId};
pub use kernels::{Op, OpKind};
pub use param::{ParamStore, Parameter};
