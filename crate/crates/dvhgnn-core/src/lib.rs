//! Dilated vision hypergraph network, desk scale.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] - a dense row-major tensor with a Wengert-tape reverse-mode
//!   autodiff engine, the small set of ops the model needs, and a finite
//!   difference oracle for checking every backward rule.
//! * [`hypergraph`] - window partitioning, cluster hyperedges (cosine argmax
//!   against grid-pooled centroids) and dilated hyperedges (a 3x3 lattice
//!   stretched by the dilation rate), plus an exact KNN baseline and the
//!   construction cost benchmark.
//! * [`dhconv`] - the two-stage dynamic hypergraph convolution: gated
//!   vertex-to-hyperedge aggregation, hyperedge-to-vertex scatter, and the
//!   multi-head block update.
//! * [`backbone`] - the four-stage pyramid classifier built from those
//!   blocks, with parameter/mult-add accounting and weight serialization.
//!
//! Numeric kernels are generic over [`Scalar`] (f32 or f64); the model-facing
//! aliases below pin everything to f64 so reruns are bit-reproducible.

pub mod backbone;
pub mod dhconv;
mod error;
pub mod hypergraph;
pub mod io;
pub mod runtime;
mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense f64 tensor, the type every model-level API trades in.
pub type Tensor = tensor::TensorBase<f64>;
/// f32 counterpart, for callers that want the smaller footprint.
pub type Tensor32 = tensor::TensorBase<f32>;
/// Autodiff tape recording f64 ops.
pub type Tape = tensor::Tape<f64>;
