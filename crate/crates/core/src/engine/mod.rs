//! Reverse-mode differentiable NCHW tensor engine.

mod float;
mod tensor;

pub mod conv;
pub mod deform;
pub mod elementwise;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod norm;
pub mod resample;
pub(crate) mod sample;
pub mod tape;
pub mod warp;

pub use conv::{ConvGeometry, ConvParams};
pub use deform::OffsetField;
pub use float::Float;
pub use norm::BatchStats;
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};
pub use warp::SamplingGrid;
