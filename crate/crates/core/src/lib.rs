pub mod converter;
pub mod corpus;
pub mod corruptor;
pub mod error;
pub mod harness;
pub mod neural;
pub mod speaker;
pub mod synthcorpus;
pub mod tokens;

pub use error::{Error, Result};
