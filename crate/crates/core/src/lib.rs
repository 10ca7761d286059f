pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gbm;
pub mod labeler;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod series;
pub mod trainer;

pub use error::{Error, Result};
