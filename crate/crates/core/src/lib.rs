pub mod attribute_features;
pub mod autograd;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod metric_learning;
pub mod model;
pub mod optim;
pub mod params;
pub mod query_composition;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
