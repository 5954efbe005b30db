pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod losses;
pub mod model;
pub mod nn;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
