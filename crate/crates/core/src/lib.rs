//! Transformer blocks with series-informed activations and augmented
//! shortcuts, a numerical verifier for their feature-diversity bounds, and
//! the tooling to train and analyse small models built from them.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`). Theory and
//! gradient checks run in `f64`; training may use `f32`.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod ops;
pub mod rng;
pub mod scalar;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Checkpoint32 = model::Checkpoint<f32>;
pub type Checkpoint64 = model::Checkpoint<f64>;
pub type Tape64 = autodiff::Tape<f64>;
