//! Sensor time series as images: ingest, normalization, a small CNN
//! regressor with its own autodiff, optimizers and cross-validated training.

pub mod error;
pub mod imageize;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod plot;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
