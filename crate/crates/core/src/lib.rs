pub mod baselines;
pub mod bench;
pub mod conic;
pub mod error;
pub mod gridless;
pub mod json;
pub mod model;
pub mod numerics;
pub mod sparrow;

pub use error::{Error, Result};
