//! Mean-field variational Bayes over exponential-family blocks, linear
//! response (LRVB) covariances, and local prior-robustness measures.

pub mod cli;
pub mod error;
pub mod expfam;
pub mod linalg;
pub mod lrvb;
pub mod mfvb;
pub mod models;
pub mod oracle;
pub mod robustness;
pub mod special;

pub use error::{Error, Result};
