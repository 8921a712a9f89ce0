//! FITC projection geometry and the predictive distribution.
//!
//! Under FITC each latent `f_i` depends on the inducing values only through
//! `a_i = υ_iᵀf̄` with `υ_i = K_ūū⁻¹ K_ūf_i`, plus independent conditional
//! variance `s_i = K_f_if_i − K_f_iū υ_i`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianMoments, GaussianNatural};
use crate::kernel::{self, GramResult, HyperParams};
use crate::linalg;
use crate::sites::{log_probit, normal_cdf};

#[derive(Debug, Clone, PartialEq)]
pub struct SiteGeometry {
    pub upsilon: DVector<f64>,
    pub s: f64,
}

/// Projection weights and conditional variance for one instance.
pub fn site_geometry(gram: &GramResult, k_cross_row: &DVector<f64>, k_diag: f64) -> SiteGeometry {
    let upsilon = gram.chol.solve(k_cross_row);
    let s = (k_diag - k_cross_row.dot(&upsilon)).max(0.0);
    SiteGeometry { upsilon, s }
}

/// Kernel quantities shared by every instance of a training pass.
///
/// Column `j` of `kuf`, `upsilon` and entry `j` of `s` refer to data row
/// `indices[j]` (or row `j` when built over the whole set).
#[derive(Debug, Clone)]
pub struct Geometry {
    pub gram: GramResult,
    /// `K_ūū` without jitter.
    pub kuu: DMatrix<f64>,
    pub kinv: DMatrix<f64>,
    pub kuf: DMatrix<f64>,
    pub upsilon: DMatrix<f64>,
    pub s: DVector<f64>,
    pub indices: Option<Vec<usize>>,
}

impl Geometry {
    pub fn new(h: &HyperParams, x: &DMatrix<f64>, indices: Option<&[usize]>) -> Result<Self> {
        let kuu = kernel::inducing_kernel(h);
        let gram = kernel::gram_from_kernel(&kuu, h.jitter, h.amplitude())?;
        let kinv = linalg::spd_inverse(&gram.chol);
        let rows = match indices {
            Some(idx) => x.select_rows(idx),
            None => x.clone(),
        };
        let kuf = kernel::cross_transposed(&rows, h)?;
        let upsilon = &kinv * &kuf;
        let amp = h.amplitude();
        let s = linalg::column_dots(&kuf, &upsilon).map(|q| (amp - q).max(0.0));
        Ok(Self {
            gram,
            kuu,
            kinv,
            kuf,
            upsilon,
            s,
            indices: indices.map(<[usize]>::to_vec),
        })
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Prior over inducing values in natural form, `(0, K⁻¹)`.
    pub fn prior(&self) -> GaussianNatural {
        GaussianNatural {
            h: DVector::zeros(self.kinv.nrows()),
            lambda: self.kinv.clone(),
        }
    }

    /// Rows of the data matrix covered by this geometry.
    pub fn rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.indices {
            Some(idx) => x.select_rows(idx),
            None => x.clone(),
        }
    }

    pub fn site(&self, j: usize) -> SiteGeometry {
        SiteGeometry {
            upsilon: self.upsilon.column(j).into_owned(),
            s: self.s[j],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub var: f64,
    pub p_pos: f64,
}

impl Prediction {
    fn new(mean: f64, var: f64) -> Self {
        Self {
            mean,
            var,
            p_pos: normal_cdf(mean / (var + 1.0).sqrt()),
        }
    }

    /// `log p(y | x*)` for `y = ±1`.
    pub fn log_prob(&self, y: f64) -> f64 {
        log_probit(y * self.mean / (self.var + 1.0).sqrt())
    }

    /// `+1` when `p_pos ≥ ½`, ties go to `+1`.
    pub fn label(&self) -> f64 {
        if self.mean >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Predictive latent mean, variance and class probability at one input.
pub fn predict(q: &GaussianMoments, xstar: &[f64], h: &HyperParams) -> Result<Prediction> {
    let gram = kernel::gram(h)?;
    let x = DMatrix::from_row_slice(1, xstar.len(), xstar);
    Ok(predict_batch(q, &gram, h, &x)?[0])
}

/// Predictions for every row of `x`, reusing a factorized gram.
pub fn predict_batch(
    q: &GaussianMoments,
    gram: &GramResult,
    h: &HyperParams,
    x: &DMatrix<f64>,
) -> Result<Vec<Prediction>> {
    if q.mu.len() != h.num_inducing() {
        return Err(Error::Dimension {
            context: "posterior dimension",
            expected: h.num_inducing(),
            found: q.mu.len(),
        });
    }
    let kuf = kernel::cross_transposed(x, h)?;
    let upsilon = linalg::spd_inverse(&gram.chol) * &kuf;
    let amp = h.amplitude();
    let s = linalg::column_dots(&kuf, &upsilon).map(|v| (amp - v).max(0.0));
    let means = upsilon.transpose() * &q.mu;
    let spread = &q.sigma * &upsilon;
    let quad = linalg::column_dots(&upsilon, &spread);
    Ok((0..x.nrows())
        .map(|i| Prediction::new(means[i], s[i] + quad[i].max(0.0)))
        .collect())
}

/// Mean negative log predictive probability and error rate.
pub fn test_metrics(preds: &[Prediction], y: &DVector<f64>) -> (f64, f64) {
    if preds.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = preds.len() as f64;
    let nll = -preds.iter().zip(y.iter()).map(|(p, &y)| p.log_prob(y)).sum::<f64>() / n;
    let wrong = preds
        .iter()
        .zip(y.iter())
        .filter(|(p, &y)| p.label() != y)
        .count();
    (nll, wrong as f64 / n)
}
