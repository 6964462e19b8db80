//! Reverse-mode automatic differentiation over the tensor kernels.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, Offender};
pub use graph::{GateGradient, Gradients, Graph, NodeId, Threshold};
pub use params::{InitScheme, ParamStore, Parameter};
