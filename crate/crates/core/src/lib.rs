//! Task vectors, model merging and distillation-based conditioning on small MLPs.

pub mod data;
pub mod distac;
pub mod error;
pub mod linalg;
pub mod loss;
pub mod merge;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
