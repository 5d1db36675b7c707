//! Hybrid selective-state-space / attention language models with rotary
//! positions on the SSM input and output projections and cross-domain
//! mixture-of-experts feed-forward layers.

pub mod attention;
pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod experts;
pub mod harness;
pub mod params;
pub mod positional;
pub mod ssm;
pub mod tasks;
pub mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
