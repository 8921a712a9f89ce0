//! Brute-force references for tests and the `--verify` mode.
//!
//! Nothing here calls into the training path: the normal CDF, the quadrature
//! rule and the difference quotients are implemented from scratch.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{synthetic_gp, Dataset, GpPrior};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianNatural, Method, SiteParams};
use crate::hypergrad::{self, FixedFactors};
use crate::inference::{FactorState, ModelState};
use crate::kernel::{HyperIndex, HyperParams};

/// Gauss–Hermite rule for `∫ e^{−x²} f(x) dx`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Nodes start from the eigenvalues of the Jacobi matrix and are polished
    /// by Newton steps on the orthonormal Hermite recurrence, which also
    /// yields the weights.
    pub fn new(n: usize) -> Self {
        assert!(n >= 2, "need at least two nodes");
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let mut guesses: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
        guesses.sort_by(|a, b| b.total_cmp(a));

        let pim4 = PI.powf(-0.25);
        let nf = n as f64;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for (i, &guess) in guesses.iter().enumerate() {
            let mut z = guess;
            let mut pp = 0.0;
            for _ in 0..20 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let step = p1 / pp;
                z -= step;
                if step.abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            weights[i] = 2.0 / (pp * pp);
        }
        Self { nodes, weights }
    }

    /// `E[f(a)]` for `a ~ N(mean, var)`.
    pub fn expect_normal(&self, mean: f64, var: f64, f: impl Fn(f64) -> f64) -> f64 {
        let scale = (2.0 * var).sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mean + scale * x))
            .sum::<f64>()
            / PI.sqrt()
    }
}

/// Standard normal CDF by series near the origin and a continued fraction in
/// the tails.
pub fn phi(x: f64) -> f64 {
    if x.abs() < 3.0 {
        let mut term = x;
        let mut sum = x;
        let x2 = x * x;
        let mut k = 1.0;
        while term.abs() > 1e-18 * sum.abs().max(1e-300) {
            k += 2.0;
            term *= x2 / k;
            sum += term;
        }
        0.5 + sum * (-0.5 * x2).exp() / (2.0 * PI).sqrt()
    } else if x < 0.0 {
        upper_tail(-x)
    } else {
        1.0 - upper_tail(x)
    }
}

/// `1 − Φ(t)` for `t > 0` via the Laplace continued fraction (modified Lentz).
fn upper_tail(t: f64) -> f64 {
    let tiny = 1e-300;
    let mut f = t;
    let mut c = t;
    let mut d = 0.0;
    for k in 1..5000 {
        let a = k as f64;
        d = t + a * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = t + a / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-0.5 * t * t).exp() / (2.0 * PI).sqrt() / f
}

/// Normalizer, mean and variance of `Φ(y a / √(s+1)) N(a; m_c, v_c)` by
/// Gauss–Hermite quadrature.
pub fn quad_tilted(y: f64, m_c: f64, v_c: f64, s: f64, nodes: usize) -> (f64, f64, f64) {
    let gh = GaussHermite::new(nodes);
    quad_tilted_with(&gh, y, m_c, v_c, s)
}

/// The tilted integral has two Gaussian-weighted forms. Integrating over
/// `a ~ N(m_c, v_c)` smooths well when `v_c ≤ s + 1`; otherwise the probit
/// is steep on the scale of the weight and Gauss–Hermite converges slowly,
/// so the noise `ε ~ N(0, s + 1)` behind the probit becomes the quadrature
/// variable and the conditional moments of `a` given `y·a > ε` are those of a
/// truncated normal.
pub fn quad_tilted_with(gh: &GaussHermite, y: f64, m_c: f64, v_c: f64, s: f64) -> (f64, f64, f64) {
    let noise = s + 1.0;
    let (z0, z1, z2) = if v_c <= noise {
        let scale = noise.sqrt();
        let lik = |a: f64| phi(y * a / scale);
        // Central moments about the cavity mean keep the variance well conditioned.
        (
            gh.expect_normal(m_c, v_c, lik),
            gh.expect_normal(m_c, v_c, |a| (a - m_c) * lik(a)),
            gh.expect_normal(m_c, v_c, |a| (a - m_c) * (a - m_c) * lik(a)),
        )
    } else {
        let sd = v_c.sqrt();
        let dens = |t: f64| (-0.5 * t * t).exp() / (2.0 * PI).sqrt();
        let t = |eps: f64| (y * m_c - eps) / sd;
        (
            gh.expect_normal(0.0, noise, |e| phi(t(e))),
            gh.expect_normal(0.0, noise, |e| y * sd * dens(t(e))),
            gh.expect_normal(0.0, noise, |e| v_c * (phi(t(e)) - t(e) * dens(t(e)))),
        )
    };
    let shift = z1 / z0;
    (z0.ln(), m_c + shift, z2 / z0 - shift * shift)
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + step;
        let up = f(&probe);
        probe[j] = x[j] - step;
        let down = f(&probe);
        probe[j] = x[j];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite("finite-difference probe"));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Worst relative error between the analytic gradient and central
/// differences, per parameter class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct GradientCheck {
    pub lengthscale: f64,
    pub amplitude: f64,
    pub inducing: f64,
}

impl GradientCheck {
    pub fn max(&self) -> f64 {
        self.lengthscale.max(self.amplitude).max(self.inducing)
    }
}

/// A small random problem with factors far from any fixed point.
pub fn random_problem(method: Method, n: usize, m: usize, d: usize, seed: u64) -> Result<(ModelState, Dataset)> {
    let data = synthetic_gp(n, d, &GpPrior { lengthscale: 1.0, amplitude: 1.5 }, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let hypers = HyperParams::new(
        DVector::from_fn(d, |_, _| rng.random_range(-0.3..0.3)),
        rng.random_range(-0.3..0.3),
        DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.5..1.5)),
        1e-6,
    )?;
    let mut state = ModelState::new(method, hypers, n, 0.01)?;
    let theta = |rng: &mut ChaCha8Rng| {
        let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.5..0.5));
        GaussianNatural {
            h: DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
            lambda: &a * a.transpose(),
        }
    };
    match method {
        Method::Ep => {
            let sites = (0..n)
                .map(|_| SiteParams {
                    nu: rng.random_range(0.05..0.5),
                    mu_t: rng.random_range(-0.5..0.5),
                    log_s: 0.0,
                })
                .collect();
            state.factors = FactorState::Ep(sites);
            state.set_hypers(state.hypers.clone(), &data)?;
        }
        Method::Sep => {
            state.factors = FactorState::Sep(theta(&mut rng));
            state.set_hypers(state.hypers.clone(), &data)?;
        }
        Method::Adf => {
            state.q_nat.add_assign(&theta(&mut rng));
        }
    }
    Ok((state, data))
}

/// Analytic gradient of the energy against `fd_gradient` of the energy with
/// the factors frozen.
pub fn check_gradient(state: &ModelState, data: &Dataset, step: f64) -> Result<GradientCheck> {
    let fixed: FixedFactors = state.fixed_factors()?;
    let analytic = hypergrad::grad_hyper(state, None, data)?;
    let h = &state.hypers;
    let numeric = fd_gradient(
        |v| match h.with_vector(v) {
            Ok(hv) => hypergrad::energy_with(state.method, &hv, data, &fixed).unwrap_or(f64::NAN),
            Err(_) => f64::NAN,
        },
        &h.to_vector(),
        step,
    )?;
    let mut out = GradientCheck::default();
    for (j, (a, f)) in analytic.values.iter().zip(&numeric).enumerate() {
        let rel = (a - f).abs() / f.abs().max(1e-6);
        let slot = match h.index(j)? {
            HyperIndex::LogLengthscale(_) => &mut out.lengthscale,
            HyperIndex::LogAmplitude => &mut out.amplitude,
            HyperIndex::Inducing { .. } => &mut out.inducing,
        };
        *slot = slot.max(rel);
    }
    Ok(out)
}

/// Everything the `--verify` flag runs.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub moment_log_z: f64,
    pub moment_mean: f64,
    pub moment_var: f64,
    pub node_doubling: f64,
    pub gradient_ep: f64,
    pub gradient_sep: f64,
    pub gradient_adf: f64,
    pub passed: bool,
}

pub const MOMENT_TOLERANCE: f64 = 1e-8;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

pub fn verify() -> Result<VerifyReport> {
    let moments = check_moment_matching(100)?;
    let doubling = check_node_doubling(100);
    let mut grads = [0.0; 3];
    for (slot, method) in grads.iter_mut().zip([Method::Ep, Method::Sep, Method::Adf]) {
        let (state, data) = random_problem(method, 20, 5, 2, 11)?;
        *slot = check_gradient(&state, &data, 1e-5)?.max();
    }
    let passed = moments.max() < MOMENT_TOLERANCE && grads.iter().all(|g| *g < GRADIENT_TOLERANCE);
    Ok(VerifyReport {
        moment_log_z: moments.log_z,
        moment_mean: moments.mean,
        moment_var: moments.var,
        node_doubling: doubling.max(),
        gradient_ep: grads[0],
        gradient_sep: grads[1],
        gradient_adf: grads[2],
        passed,
    })
}

/// Largest absolute discrepancies between two sets of tilted moments.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MomentDiscrepancy {
    pub log_z: f64,
    pub mean: f64,
    pub var: f64,
}

impl MomentDiscrepancy {
    pub fn max(&self) -> f64 {
        self.log_z.max(self.mean).max(self.var)
    }

    fn absorb(&mut self, a: (f64, f64, f64), b: (f64, f64, f64)) {
        self.log_z = self.log_z.max((a.0 - b.0).abs());
        self.mean = self.mean.max((a.1 - b.1).abs());
        self.var = self.var.max((a.2 - b.2).abs());
    }
}

/// Grid used by the moment-matching check.
pub fn moment_grid() -> Vec<(f64, f64, f64, f64)> {
    let mut grid = Vec::new();
    for y in [-1.0, 1.0] {
        for m in [-4.0, -1.0, 0.0, 1.0, 4.0] {
            for v in [0.1, 1.0, 10.0] {
                for s in [0.0, 1.0, 5.0] {
                    grid.push((y, m, v, s));
                }
            }
        }
    }
    grid
}

/// Closed-form tilted moments against quadrature over `moment_grid`.
pub fn check_moment_matching(nodes: usize) -> Result<MomentDiscrepancy> {
    let gh = GaussHermite::new(nodes);
    let mut worst = MomentDiscrepancy::default();
    for (y, m, v, s) in moment_grid() {
        let t = crate::sites::tilted_moments(y, m, v, s)?;
        worst.absorb((t.log_z, t.mu_hat, t.v_hat), quad_tilted_with(&gh, y, m, v, s));
    }
    Ok(worst)
}

/// Quadrature at `nodes` against `2·nodes` over `moment_grid`.
pub fn check_node_doubling(nodes: usize) -> MomentDiscrepancy {
    let a = GaussHermite::new(nodes);
    let b = GaussHermite::new(2 * nodes);
    let mut worst = MomentDiscrepancy::default();
    for (y, m, v, s) in moment_grid() {
        worst.absorb(quad_tilted_with(&a, y, m, v, s), quad_tilted_with(&b, y, m, v, s));
    }
    worst
}
