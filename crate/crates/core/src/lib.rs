pub mod config;
pub mod data;
pub mod encoder;
pub mod gradsuite;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod predictor;
pub mod proposer;
pub mod regressor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
