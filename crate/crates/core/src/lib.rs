//! Multi-label relation extraction with attentive capsule routing over a
//! peephole Bi-LSTM encoder.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod capsnet;
pub mod checkpoint;
pub mod data;
pub mod encoder;
mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
mod scalar;
pub mod stats;
pub mod synthetic;
pub mod tape;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{HeadKind, LossKind, Model, ModelConfig, RoutingKind};
pub use scalar::{sigmoid, softmax, tanh, Scalar};
pub use tensor::Matrix;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type Tape64<'p> = tape::Tape<'p, f64>;
