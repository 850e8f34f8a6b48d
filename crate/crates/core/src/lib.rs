//! Reversible rewiring of residual backbones, trained end to end for temporal
//! action localization.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense row-major tensors and deterministic kernels.
//! * [`autodiff`]: reverse-mode differentiation, with a cache-all and a
//!   reversible-recompute backward pass and a finite-difference oracle.
//! * [`reversible`]: the two-stream step, its exact inverse, entry/exit adapters.
//! * [`rewiring`]: network specs, the residual-to-reversible transform, parameter
//!   stores and the checkpoint container.
//! * [`backbone`]: executable backbones, memory ledger and analytic memory model.
//! * [`tal`]: synthetic data, localization head, loss, decoding and mAP evaluation.
//! * [`harness`]: optimizers, training loop and memory profiling.
//!
//! Everything numerical is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the concrete instantiations.

pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod harness;
pub mod reversible;
pub mod rewiring;
pub mod scalar;
pub mod tal;
pub mod tensor;

pub use autodiff::{backward, forward_with_tape, numerical_gradient, ExecMode, GradientMap, Tape};
pub use backbone::{Backbone, MemoryCategory, MemoryLedger};
pub use error::{Error, Result};
pub use rewiring::{remap_parameters, rewire, validate_spec, NetworkSpec, ParameterStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParameterStore32 = ParameterStore<f32>;
pub type ParameterStore64 = ParameterStore<f64>;
pub type Backbone32 = Backbone<f32>;
pub type Backbone64 = Backbone<f64>;
pub type GradientMap32 = GradientMap<f32>;
pub type GradientMap64 = GradientMap<f64>;
