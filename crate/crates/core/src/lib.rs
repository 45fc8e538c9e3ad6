pub mod aligner;
pub mod checks;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
