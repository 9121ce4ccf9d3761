//! Numerical core for momentum-accelerated sparse mixture-of-experts
//! dynamics: a minimal reverse-mode autodiff engine, routed expert layers,
//! the family of momentum layer wrappers, closed-form stability analysis of
//! the underlying linear recurrence, a multi-objective descent oracle, and
//! expert-load diagnostics.

pub mod checkpoint;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod gradcheck;
pub mod mgda;
pub mod model;
pub mod moe;
pub mod stability;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
