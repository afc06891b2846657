pub mod batch;
pub mod corpus;
pub mod decoder;
pub mod discretize;
pub mod encoder;
pub mod error;
pub mod latent;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod retrieval;
pub mod rng;
pub mod synthetic;
pub mod transfer;

pub use error::{Error, Result};
