//! Masked diffusion language modelling with dynamic-size block decoding,
//! monotonic entropy-descent rewards and group-relative policy optimisation.

pub mod analysis;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod grpo;
pub mod net;
pub mod rewards;
pub mod seq;
pub mod tasks;
pub mod theorem1;
pub mod trace;

pub use error::{Error, Result};
