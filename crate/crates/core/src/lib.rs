//! Light-field salient object detection: a frozen transformer encoder with
//! per-input adapters, selective state-space fusion across focal slices and
//! between the all-focus and slice modalities, and a convolutional decoder.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix the precision.

pub mod error;
pub mod init;
pub mod inter_modal;
pub mod inter_slice;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod scan;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Gradients, Tape, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
