use nalgebra::DVector;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{contamination_sensitivity, hyperparam_sensitivity, ContaminationSpec};
use crate::error::{Error, Result};
use crate::lrvb::LrvbSystem;
use crate::mfvb::{ModelSpec, Quantity, VbSolution};

#[derive(Debug, Clone)]
pub enum Direction {
    Hyper { name: String, delta: Vec<f64> },
    Contamination { label: String, spec: ContaminationSpec },
}

impl Direction {
    pub fn label(&self) -> &str {
        match self {
            Direction::Hyper { name, .. } => name,
            Direction::Contamination { label, .. } => label,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SensitivityQuery {
    pub quantity: String,
    pub grad_h: DVector<f64>,
    pub direction: Direction,
}

impl SensitivityQuery {
    /// Sensitivity of a tracked quantity to one named hyperparameter.
    pub fn hyperparameter(model: &ModelSpec, quantity: &Quantity, name: &str) -> Result<Self> {
        Ok(Self {
            quantity: quantity.name.clone(),
            grad_h: quantity.gradient(model.dim()),
            direction: Direction::Hyper { name: name.to_string(), delta: model.hyper_direction(name)? },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportEntry {
    pub quantity: String,
    pub direction: String,
    pub value: Option<f64>,
    /// Linear response posterior standard deviation of the quantity.
    pub posterior_sd: Option<f64>,
    /// `value / posterior_sd`.
    pub normalized: Option<f64>,
    /// `"<ErrorName>: <message>"` when this entry failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMetadata {
    pub model: String,
    pub hyperparameters: Vec<(String, f64)>,
    pub model_hash: String,
    pub solution_hash: String,
    pub elbo: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub condition: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub metadata: ReportMetadata,
    pub entries: Vec<ReportEntry>,
}

fn error_text(e: &Error) -> String {
    format!("{}: {e}", e.name())
}

pub fn solution_hash(sol: &VbSolution) -> String {
    let mut h = Sha256::new();
    for v in sol.mean.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn model_hash(model: &ModelSpec) -> String {
    hex::encode(Sha256::digest(model.fingerprint().as_bytes()))
}

fn evaluate(model: &ModelSpec, sol: &VbSolution, sys: &LrvbSystem, q: &SensitivityQuery) -> Result<f64> {
    match &q.direction {
        Direction::Hyper { delta, .. } => Ok(q.grad_h.dot(&hyperparam_sensitivity(model, sol, sys, delta)?)),
        Direction::Contamination { spec, .. } => contamination_sensitivity(model, sol, sys, spec, &q.grad_h),
    }
}

/// Evaluates every query; failures are recorded on their own entry and do
/// not abort the rest.
pub fn make_report(
    model: &ModelSpec,
    sol: &VbSolution,
    sys: &LrvbSystem,
    queries: &[SensitivityQuery],
) -> SensitivityReport {
    let entries = queries
        .iter()
        .map(|q| {
            let mut entry = ReportEntry {
                quantity: q.quantity.clone(),
                direction: q.direction.label().to_string(),
                value: None,
                posterior_sd: None,
                normalized: None,
                error: None,
            };
            match evaluate(model, sol, sys, q) {
                Ok(v) => entry.value = Some(v),
                Err(e) => {
                    entry.error = Some(error_text(&e));
                    return entry;
                }
            }
            match sys.variance(&q.grad_h) {
                Ok(var) if var > 0.0 && var.is_finite() => {
                    let sd = var.sqrt();
                    entry.posterior_sd = Some(sd);
                    entry.normalized = entry.value.map(|v| v / sd);
                }
                Ok(_) => entry.error = Some(error_text(&Error::ZeroVariance(q.quantity.clone()))),
                Err(e) => entry.error = Some(error_text(&e)),
            }
            entry
        })
        .collect();
    SensitivityReport {
        metadata: ReportMetadata {
            model: model.name().to_string(),
            hyperparameters: model.hyper_names().into_iter().zip(model.hyperparams().iter().copied()).collect(),
            model_hash: model_hash(model),
            solution_hash: solution_hash(sol),
            elbo: sol.elbo,
            iterations: sol.iterations,
            grad_norm: sol.grad_norm,
            condition: sys.condition,
        },
        entries,
    }
}
