//! Deep-equilibrium fixed-point inference and training for flow-style
//! update operators.
//!
//! The crate is organized around a small dense-tensor kernel ([`tensor`]),
//! black-box fixed-point solvers ([`solver`]), implicit and inexact
//! gradients for equilibrium solves ([`grad`]), the equilibrium layer with
//! sparse fixed-point correction and warm-start reuse ([`deq`]), and a
//! miniature correlation-volume flow operator with hand-written VJPs and a
//! synthetic data generator ([`flow`]).
//!
//! Everything is `f64` and deterministic: identical inputs and seeds give
//! bit-identical results, with or without the `parallel` feature.

pub mod deq;
pub mod error;
pub mod flow;
pub mod grad;
pub mod par;
pub mod rng;
pub mod solver;
pub mod tensor;

pub use error::CoreError;
pub use rng::Rng;
pub use tensor::Tensor;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;
