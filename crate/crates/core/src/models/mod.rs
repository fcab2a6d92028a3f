//! Model zoo: conjugate fixtures and the hierarchical treatment-effect
//! model with an LKJ-style prior on the effect covariance.

pub mod conjugate;
pub mod microcredit;
mod polynomial;

use sha2::{Digest, Sha256};

pub use conjugate::{GaussianTarget, NormalInverseGamma, NormalNormal};
pub use microcredit::{
    build_microcredit_model, simulate_microcredit, Microcredit, MicrocreditData, MicrocreditPriors, MicrocreditTruth,
    Site,
};

/// Hex SHA-256 over a model name and the bit patterns of its inputs.
pub(crate) fn fingerprint_of(name: &str, values: &[f64]) -> String {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    for v in values {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}
