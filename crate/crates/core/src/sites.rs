//! Probit tilted moments and the moment-matching site projection.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::gaussian::SiteParams;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this argument the Gaussian tail is evaluated by its asymptotic series.
const TAIL: f64 = -30.0;

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// `1 − 1/z² + 3/z⁴ − 15/z⁶ + …`, the correction in `Φ(z) ≈ N(z)/(−z)·S(z)`.
fn tail_series(z: f64) -> f64 {
    let w = 1.0 / (z * z);
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..8 {
        term *= -((2 * k - 1) as f64) * w;
        sum += term;
    }
    sum
}

/// `log Φ(z)`, accurate in both tails.
pub fn log_probit(z: f64) -> f64 {
    if z > 0.0 {
        (-0.5 * libm::erfc(z * FRAC_1_SQRT_2)).ln_1p()
    } else if z >= TAIL {
        (0.5 * libm::erfc(-z * FRAC_1_SQRT_2)).ln()
    } else {
        -0.5 * z * z - LN_SQRT_2PI - (-z).ln() + tail_series(z).ln()
    }
}

/// Inverse Mills ratio `N(z)/Φ(z)`.
pub fn mills_ratio(z: f64) -> f64 {
    if z >= TAIL {
        (-0.5 * z * z - LN_SQRT_2PI - log_probit(z)).exp()
    } else {
        -z / tail_series(z)
    }
}

/// Moments of `Φ(y·a/√(s+1))·N(a; m_c, v_c)` and derivatives of its log normalizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltedResult {
    pub log_z: f64,
    /// `∂ log Z / ∂ m_c`.
    pub alpha: f64,
    /// `∂² log Z / ∂ m_c²`.
    pub beta: f64,
    pub mu_hat: f64,
    pub v_hat: f64,
}

pub fn tilted_moments(y: f64, m_c: f64, v_c: f64, s: f64) -> Result<TiltedResult> {
    if !(v_c > 0.0) {
        return Err(Error::InvalidCavity(v_c));
    }
    let c = v_c + s + 1.0;
    let sc = c.sqrt();
    let z = y * m_c / sc;
    let log_z = log_probit(z);
    let lambda = mills_ratio(z);
    let alpha = y * lambda / sc;
    let beta = -alpha * (alpha + m_c / c);
    let r = TiltedResult {
        log_z,
        alpha,
        beta,
        mu_hat: m_c + v_c * alpha,
        v_hat: v_c + v_c * v_c * beta,
    };
    let finite = [r.log_z, r.alpha, r.beta, r.mu_hat, r.v_hat]
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite("tilted moments"));
    }
    if !(r.v_hat > 0.0) {
        return Err(Error::InvalidCavity(r.v_hat));
    }
    Ok(r)
}

/// Moment-matching projection with damping `rho`.
///
/// The undamped target makes `N(m_c, v_c)·exp(−ν̃a²/2 + μ̃a)` have mean
/// `mu_hat` and variance `v_hat`; `log_s` then makes the site integrate
/// against the cavity to `Z`. All three scalars move by the same convex
/// combination.
pub fn site_update(m_c: f64, v_c: f64, tr: &TiltedResult, old: &SiteParams, rho: f64) -> Result<SiteParams> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("damping {rho} outside (0, 1]")));
    }
    // 1 + β v_c = v_hat / v_c.
    let shrink = 1.0 + tr.beta * v_c;
    if !(shrink > 0.0) {
        return Err(Error::InvalidCavity(shrink));
    }
    let nu = -tr.beta / shrink;
    let mu_t = (tr.alpha - tr.beta * m_c) / shrink;
    let one_plus = 1.0 + nu * v_c;
    if !(one_plus > 0.0) {
        return Err(Error::InvalidCavity(one_plus));
    }
    let log_s = tr.log_z + 0.5 * one_plus.ln()
        - (2.0 * m_c * mu_t + mu_t * mu_t * v_c - m_c * m_c * nu) / (2.0 * one_plus);
    let target = SiteParams { nu, mu_t, log_s };
    let blend = |old: f64, new: f64| (1.0 - rho) * old + rho * new;
    let out = SiteParams {
        nu: blend(old.nu, target.nu),
        mu_t: blend(old.mu_t, target.mu_t),
        log_s: blend(old.log_s, target.log_s),
    };
    if !(out.nu.is_finite() && out.mu_t.is_finite() && out.log_s.is_finite()) {
        return Err(Error::NonFinite("site update"));
    }
    Ok(out)
}
