//! Minimal tensor engine: dense row-major tensors, define-by-run
//! reverse-mode differentiation, a few layers and Adam.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in
//! `f32` for training and `f64` for finite-difference checks.

pub mod error;
pub mod graph;
pub mod layers;
pub mod numeric;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::NnError;
pub use graph::{Gradients, Graph, Tracking, Var};
pub use layers::{Conv2d, LayerNorm, Linear, Mlp};
pub use optim::Adam;
pub use params::{Param, ParamGrads, ParamStore};
pub use scalar::{lit, Scalar};
pub use tensor::{gemm, MatRef, Tensor};
