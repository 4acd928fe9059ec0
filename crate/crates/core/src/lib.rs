//! Neural-network inference as structured sparse coding.
//!
//! A network is a chain of non-negative LASSO problems, one per layer,
//! optionally tied together by skip connections. Inference can approximate
//! the codes with one thresholding pass ([`PursuitMode::Ltp`]), refine each
//! layer on its own ([`PursuitMode::Lbp`]), or run block coordinate descent
//! on the single global problem ([`PursuitMode::Dp`]).

// Negated comparisons below are NaN guards.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversarial;
pub mod autodiff;
pub mod backend;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dictionary;
mod error;
pub mod experiment;
pub mod model;
pub mod parallel;
pub mod pursuit;
pub mod report;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use dictionary::{LayerSpec, NetworkSpec, OperatorKind, SkipKind, SkipSpec};
pub use model::{init_model, ModelParams};
pub use parallel::Exec;
pub use pursuit::{PursuitConfig, PursuitMode};
pub use tensor::Tensor;
