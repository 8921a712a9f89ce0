//! JSON checkpoints of a trained model.
//!
//! Floats are written in their shortest round-trip decimal form and parsed
//! back exactly, so `load(save(state))` reproduces every stored binary64.
//! Matrices are stored as arrays of rows.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianNatural, Method, SiteParams};
use crate::hypergrad::AdamState;
use crate::inference::{FactorState, ModelState};
use crate::kernel::HyperParams;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NaturalRecord {
    h: Vec<f64>,
    lambda: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HyperRecord {
    log_lengthscales: Vec<f64>,
    log_amplitude: f64,
    inducing_points: Vec<Vec<f64>>,
    jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    method: Method,
    n: usize,
    step: u64,
    hypers: HyperRecord,
    q_nat: NaturalRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sites: Option<Vec<SiteParams>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta: Option<NaturalRecord>,
    optimizer: AdamState,
}

fn rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>], cols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Checkpoint(format!("ragged matrix `{what}`")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), cols, &flat))
}

impl NaturalRecord {
    fn from(nat: &GaussianNatural) -> Self {
        Self {
            h: nat.h.iter().copied().collect(),
            lambda: rows(&nat.lambda),
        }
    }

    fn to_natural(&self, what: &str) -> Result<GaussianNatural> {
        let m = self.h.len();
        if self.lambda.len() != m {
            return Err(Error::Checkpoint(format!("`{what}` precision is not {m}×{m}")));
        }
        Ok(GaussianNatural {
            h: DVector::from_column_slice(&self.h),
            lambda: matrix(&self.lambda, m, what)?,
        })
    }
}

fn to_file(state: &ModelState) -> CheckpointFile {
    let h = &state.hypers;
    CheckpointFile {
        format_version: FORMAT_VERSION,
        method: state.method,
        n: state.n,
        step: state.step,
        hypers: HyperRecord {
            log_lengthscales: h.log_lengthscales.iter().copied().collect(),
            log_amplitude: h.log_amplitude,
            inducing_points: rows(&h.inducing_points),
            jitter: h.jitter,
        },
        q_nat: NaturalRecord::from(&state.q_nat),
        sites: state.sites().map(<[SiteParams]>::to_vec),
        theta: state.theta().map(NaturalRecord::from),
        optimizer: state.opt.clone(),
    }
}

fn from_file(f: CheckpointFile) -> Result<ModelState> {
    if f.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            f.format_version
        )));
    }
    let d = f.hypers.log_lengthscales.len();
    let hypers = HyperParams::new(
        DVector::from_column_slice(&f.hypers.log_lengthscales),
        f.hypers.log_amplitude,
        matrix(&f.hypers.inducing_points, d, "inducing_points")?,
        f.hypers.jitter,
    )?;
    let factors = match (f.method, f.sites, f.theta) {
        (Method::Ep, Some(sites), None) if sites.len() == f.n => FactorState::Ep(sites),
        (Method::Sep, None, Some(theta)) => FactorState::Sep(theta.to_natural("theta")?),
        (Method::Adf, None, None) => FactorState::Adf,
        (m, ..) => return Err(Error::Checkpoint(format!("factor state inconsistent with method {m}"))),
    };
    let mut state = ModelState::new(f.method, hypers, f.n, f.optimizer.learning_rate)?;
    state.q_nat = f.q_nat.to_natural("q_nat")?;
    if state.q_nat.dim() != state.hypers.num_inducing() {
        return Err(Error::Checkpoint("posterior dimension differs from inducing count".into()));
    }
    state.factors = factors;
    state.step = f.step;
    state.opt = f.optimizer;
    Ok(state)
}

pub fn to_json(state: &ModelState) -> Result<String> {
    Ok(serde_json::to_string_pretty(&to_file(state))?)
}

pub fn from_json(text: &str) -> Result<ModelState> {
    from_file(serde_json::from_str(text)?)
}

pub fn save(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_json(state)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelState> {
    from_json(&fs::read_to_string(path)?)
}
