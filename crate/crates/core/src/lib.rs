pub mod autodiff;
pub mod baselines;
pub mod channel;
pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pilot;
pub mod precoder;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
