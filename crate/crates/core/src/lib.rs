pub mod adapter;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod rules;
pub mod sampler;

pub use error::{Error, Result};
