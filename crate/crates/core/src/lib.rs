pub mod backbone;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod prompt;
pub mod train;

pub use error::{Error, Result};
