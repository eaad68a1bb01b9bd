pub mod error;
pub mod baselines;
pub mod cli;
pub mod dataio;
pub mod dmtl;
pub mod evalrank;
pub mod grouping;
pub mod numerics;

pub use error::{Error, Result};
