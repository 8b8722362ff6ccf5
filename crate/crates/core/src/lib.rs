//! Long-sequence Transformer encoder built from sliding-window layers and
//! k-means routed attention layers, with hashing and fixed-position baselines.

pub mod attention;
pub mod baselines;
pub mod clustering;
pub mod error;
pub mod harness;
pub mod nn;
pub mod sliding;

pub use error::{Error, Result};
