pub mod error;
pub mod numerics;
pub mod rng;
pub mod attention;
pub mod routing;
pub mod moe;
pub mod metrics;
pub mod pgm_oracle;
pub mod data;
pub mod trainer;
pub mod cli;

pub use error::{Error, Result};
