pub mod container;
pub mod crossmodal;
pub mod dataset;
pub mod elbo;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod expert;
pub mod gaussian;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod presets;
pub mod prior;
pub mod seed;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
