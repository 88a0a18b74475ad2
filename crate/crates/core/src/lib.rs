// Kernels index several buffers with one loop variable.
#![allow(clippy::needless_range_loop)]

pub mod engine;
pub mod error;
pub mod eval;
pub mod blocks;
pub mod codec;
pub mod data;
pub mod graph;
pub mod topology;
pub mod trainer;
pub mod transform;

pub use engine::{Float, Shape, Tensor};
pub use error::{Error, Result};
