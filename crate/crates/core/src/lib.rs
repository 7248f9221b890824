//! Multi-task story VAE: corpus handling, LDA topics, negative samples, the
//! transformer VAE, its training objective and the evaluation suite.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod negatives;
pub mod rng;
pub mod topics;
pub mod training;

pub use error::{Error, Result};
