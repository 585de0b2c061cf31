//! Differentiable tensor substrate: raw tensors, a recorded reverse-mode
//! tape, named parameter sets and a finite-difference gradient oracle.

pub mod functional;
pub mod gradcheck;
pub mod graph;
pub mod opcheck;
pub mod params;
pub mod tensor;

pub use functional::{cosine_similarity, moving_average, softmax};
pub use gradcheck::{grad_check, GradReport};
pub use opcheck::{check_all_ops, check_op, OpReport, CHECKED_OPS};
pub use graph::{GradStore, Graph, Var};
pub use params::{normal_sample, BoundParams, Param, ParamGrads, ParamSet};
pub use tensor::RawTensor;
