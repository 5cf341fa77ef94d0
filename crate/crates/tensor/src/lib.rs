//! Dense `f64` tensor kernel with a reverse-mode tape and an independent
//! central-difference gradient oracle.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{
    compare_gradients, finite_difference_entries, finite_difference_oracle,
    finite_difference_subset, GradCheckReport,
};
pub use graph::{backward, BoundParams, Gradients, Graph, Var};
pub use kernels::ConvGeom;
pub use tensor::{GradMap, ParamSet, Tensor};
