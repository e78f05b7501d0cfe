pub mod agent;
pub mod baseline;
pub mod cli;
pub mod diffcore;
pub mod envs;
pub mod error;
pub mod model;
pub mod planner;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
