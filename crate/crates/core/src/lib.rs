pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod generator;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod synthetic;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
