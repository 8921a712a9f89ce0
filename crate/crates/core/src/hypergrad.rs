//! The EP energy `log Z_q`, its gradient with respect to the kernel
//! hyperparameters and inducing inputs, and the Adam ascent step.
//!
//! Gradients hold the stored factors fixed (EP site scalars, the SEP global
//! factor, or ADF's accumulated factor) and differentiate everything that
//! depends on the kernel. Each energy term is first differentiated with
//! respect to the covariance blocks `K_ūū`, `K_ūf` and `diag K_ff`; a single
//! [`kernel::pullback`] then maps those block adjoints onto every trainable
//! coordinate. At an EP fixed point this coincides with the classical
//! moment-matching expression `½ tr[K⁻¹(Σ + μμᵀ − K)K⁻¹ ∂K] + Σ ∂log Z_i`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fitc::Geometry;
use crate::gaussian::{self, Factors, GaussianNatural, Method, Posterior, SiteParams};
use crate::inference::ModelState;
use crate::kernel::{self, HyperParams};
use crate::linalg;
use crate::sites::tilted_moments;

/// `∂ log Z_q / ∂ξ` in the flat trainable-parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGradient {
    pub values: Vec<f64>,
}

impl HyperGradient {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Likelihood factors frozen while the kernel varies.
#[derive(Debug, Clone, PartialEq)]
pub enum FixedFactors {
    /// EP site scalars; their directions follow the kernel.
    Sites(Vec<SiteParams>),
    /// A natural-parameter factor over the inducing values (SEP's `θ`, or
    /// `q − prior` for ADF).
    Global(GaussianNatural),
}

/// Weight of the global factor left in the shared cavity.
fn cavity_weight(method: Method, n: usize) -> f64 {
    match method {
        Method::Sep if n > 0 => 1.0 - 1.0 / n as f64,
        Method::Sep => 0.0,
        _ => 1.0,
    }
}

/// `g` of a 1-D Gaussian in mean/variance form, without the `2π` constant.
fn g1(m: f64, v: f64) -> f64 {
    0.5 * m * m / v + 0.5 * v.ln()
}

/// `g(q) − g(prior)` using the prior's log-determinant from the gram factor.
fn posterior_gain(q: &Posterior, geo: &Geometry) -> f64 {
    0.5 * q.nat.h.dot(&q.moments.mu) - 0.5 * linalg::log_det(&q.chol) - 0.5 * linalg::log_det(&geo.gram.chol)
}

pub fn ep_energy(state: &ModelState, data: &Dataset) -> Result<f64> {
    energy_with(state.method, &state.hypers, data, &state.fixed_factors()?)
}

/// Energy at arbitrary hyperparameters with the factors held fixed.
pub fn energy_with(method: Method, hypers: &HyperParams, data: &Dataset, fixed: &FixedFactors) -> Result<f64> {
    let geo = Geometry::new(hypers, &data.x, None)?;
    energy_on(method, &geo, &data.y, fixed)
}

pub(crate) fn energy_on(method: Method, geo: &Geometry, y: &DVector<f64>, fixed: &FixedFactors) -> Result<f64> {
    let n = y.len();
    match (method, fixed) {
        (Method::Ep, FixedFactors::Sites(sites)) => {
            check_len(sites.len(), n)?;
            let q = gaussian::reconstruct(
                &geo.prior(),
                Factors::Sites {
                    sites,
                    upsilon: &geo.upsilon,
                },
            )?;
            let (m_a, v_a) = projected_marginals(&q, &geo.upsilon);
            let mut f = posterior_gain(&q, geo);
            for i in 0..n {
                let (m_c, v_c) = gaussian::ep_cavity(m_a[i], v_a[i], &sites[i])?;
                let t = tilted_moments(y[i], m_c, v_c, geo.s[i])?;
                f += t.log_z + g1(m_c, v_c) - g1(m_a[i], v_a[i]);
            }
            Ok(f)
        }
        (Method::Sep | Method::Adf, FixedFactors::Global(theta)) => {
            let prior = geo.prior();
            let q = gaussian::reconstruct(&prior, Factors::Global(theta))?;
            let mut f = posterior_gain(&q, geo);
            let cav = if method == Method::Sep {
                let c = gaussian::reconstruct(&prior, Factors::Global(&theta.scaled(cavity_weight(method, n))))?;
                f += n as f64 * (c.log_partition() - q.log_partition());
                c
            } else {
                q
            };
            let (m_c, v_c) = projected_marginals(&cav, &geo.upsilon);
            for i in 0..n {
                f += tilted_moments(y[i], m_c[i], v_c[i], geo.s[i])?.log_z;
            }
            Ok(f)
        }
        _ => Err(Error::Config(format!("factor state does not match method {method}"))),
    }
}

fn check_len(found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::Dimension {
            context: "site count",
            expected,
            found,
        });
    }
    Ok(())
}

/// Means and variances of every `υ_iᵀf̄` under a Gaussian.
pub(crate) fn projected_marginals(q: &Posterior, upsilon: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let spread = &q.moments.sigma * upsilon;
    (upsilon.tr_mul(&q.moments.mu), linalg::column_dots(upsilon, &spread))
}

/// Exact (`batch = None`) or unbiased minibatch gradient of `log Z_q`.
///
/// The minibatch estimator keeps the prior and cavity normalizer terms exact
/// and rescales the per-instance likelihood terms by `n/|batch|`, so it is
/// linear in the per-instance contributions and averages to the exact value
/// over uniformly drawn batches.
pub fn grad_hyper(state: &ModelState, batch: Option<&[usize]>, data: &Dataset) -> Result<HyperGradient> {
    if let Some(b) = batch {
        if let Some(&bad) = b.iter().find(|&&i| i >= data.len()) {
            return Err(Error::InvalidIndex {
                index: bad,
                count: data.len(),
            });
        }
    }
    let fixed = state.fixed_factors()?;
    let geo = match (state.method, batch) {
        (Method::Ep, _) | (_, None) => Geometry::new(&state.hypers, &data.x, None)?,
        (_, Some(b)) => Geometry::new(&state.hypers, &data.x, Some(b))?,
    };
    gradient_on(state.method, &state.hypers, &geo, data, batch, &fixed, None)
}

/// Gradient given a geometry that covers every row (EP) or exactly the rows
/// of `batch` (SEP and ADF). `posterior`, when supplied, must equal the
/// prior of `geo` combined with `fixed`; it saves one factorization.
pub(crate) fn gradient_on(
    method: Method,
    hypers: &HyperParams,
    geo: &Geometry,
    data: &Dataset,
    batch: Option<&[usize]>,
    fixed: &FixedFactors,
    posterior: Option<&Posterior>,
) -> Result<HyperGradient> {
    let n = data.len();
    let scale = match batch {
        Some(b) if !b.is_empty() => n as f64 / b.len() as f64,
        Some(_) => 0.0,
        None => 1.0,
    };
    let values = match (method, fixed) {
        (Method::Ep, FixedFactors::Sites(sites)) => {
            check_len(sites.len(), n)?;
            let active: Vec<usize> = match batch {
                Some(b) => b.to_vec(),
                None => (0..n).collect(),
            };
            let q = match posterior {
                Some(q) => q.clone(),
                None => gaussian::reconstruct(
                    &geo.prior(),
                    Factors::Sites {
                        sites,
                        upsilon: &geo.upsilon,
                    },
                )?,
            };
            ep_gradient(hypers, &data.x, geo, &q, &data.y, sites, &active, scale)?
        }
        (Method::Sep | Method::Adf, FixedFactors::Global(theta)) => {
            let x = geo.rows(&data.x);
            let y = match batch {
                Some(b) => DVector::from_iterator(b.len(), b.iter().map(|&i| data.y[i])),
                None => data.y.clone(),
            };
            let q = match posterior {
                Some(q) => q.clone(),
                None => gaussian::reconstruct(&geo.prior(), Factors::Global(theta))?,
            };
            global_gradient(method, hypers, &x, geo, &q, &y, theta, n, scale)?
        }
        _ => return Err(Error::Config(format!("factor state does not match method {method}"))),
    };
    let g = HyperGradient { values };
    if !g.is_finite() {
        return Err(Error::NonFinite("hyperparameter gradient"));
    }
    Ok(g)
}

/// EP energy written as a function of `A = K + P N Pᵀ` (with `P = K_ūf`,
/// `N = diag ν̃`), `P` itself, `K` and `diag K_ff`:
///
/// `½ bᵀA⁻¹b − ½ log|A| + ½ log|K| + Σ_i φ_i(p_iᵀA⁻¹b, p_iᵀA⁻¹p_i, s_i)`,
/// with `b = P μ̃`. Every matrix identity below follows from that form.
#[allow(clippy::too_many_arguments)]
fn ep_gradient(
    hypers: &HyperParams,
    x: &DMatrix<f64>,
    geo: &Geometry,
    q: &Posterior,
    y: &DVector<f64>,
    sites: &[SiteParams],
    active: &[usize],
    scale: f64,
) -> Result<Vec<f64>> {
    let n = sites.len();
    let kinv = &geo.kinv;
    let nu = DVector::from_iterator(n, sites.iter().map(|s| s.nu));
    let mu_t = DVector::from_iterator(n, sites.iter().map(|s| s.mu_t));

    // C = A⁻¹P = K⁻¹ Σ Υ and w = A⁻¹b = K⁻¹ μ.
    let spread = &q.moments.sigma * &geo.upsilon;
    let c = kinv * &spread;
    let w = kinv * &q.moments.mu;

    let mut ga = DVector::zeros(n);
    let mut gv = DVector::zeros(n);
    let mut gs = DVector::zeros(n);
    for &i in active {
        let m_a = geo.upsilon.column(i).dot(&q.moments.mu);
        let v_a = geo.upsilon.column(i).dot(&spread.column(i));
        let site = &sites[i];
        let (m_c, v_c) = gaussian::ep_cavity(m_a, v_a, site)?;
        let t = tilted_moments(y[i], m_c, v_c, geo.s[i])?;
        let cc = v_c + geo.s[i] + 1.0;
        let gamma = -t.alpha * m_c / (2.0 * cc);
        let r = 1.0 - site.nu * v_a;
        let lead = t.alpha + m_c / v_c;
        ga[i] += scale * (lead / r - m_a / v_a);
        gv[i] += scale
            * (lead * (site.nu * m_a - site.mu_t) / (r * r)
                + (gamma + 0.5 / v_c - 0.5 * m_c * m_c / (v_c * v_c)) / (r * r)
                - (0.5 / v_a - 0.5 * m_a * m_a / (v_a * v_a)));
        gs[i] += scale * gamma;
    }

    let rr = &c * &ga;
    let mut ainv = kinv * &q.moments.sigma * kinv;
    linalg::symmetrize(&mut ainv);

    let mut g_a = ainv * -0.5;
    g_a.ger(-0.5, &w, &w, 1.0);
    g_a.ger(-1.0, &rr, &w, 1.0);
    g_a -= linalg::weighted_gram(&c, &gv);

    let g_k = &g_a + kinv * 0.5 + linalg::weighted_gram(&geo.upsilon, &gs);

    let sym = &g_a + g_a.transpose();
    let mut g_p = sym * linalg::scale_columns(&geo.kuf, &nu);
    g_p.ger(1.0, &w, &(&mu_t + &ga), 1.0);
    g_p.ger(1.0, &rr, &mu_t, 1.0);
    g_p += linalg::scale_columns(&c, &(&gv * 2.0));
    g_p -= linalg::scale_columns(&geo.upsilon, &(&gs * 2.0));

    Ok(kernel::pullback(hypers, x, &geo.kuu, &geo.kuf, &g_k, &g_p, &gs))
}

/// SEP and ADF share one shape: a prior, a posterior `prior + θ`, a cavity
/// `prior + κθ` and projected likelihood terms read off the cavity.
#[allow(clippy::too_many_arguments)]
fn global_gradient(
    method: Method,
    hypers: &HyperParams,
    x: &DMatrix<f64>,
    geo: &Geometry,
    q: &Posterior,
    y: &DVector<f64>,
    theta: &GaussianNatural,
    n: usize,
    scale: f64,
) -> Result<Vec<f64>> {
    let kinv = &geo.kinv;
    let prior = geo.prior();
    let second = |p: &Posterior| {
        let mut s = p.moments.sigma.clone();
        s.ger(1.0, &p.moments.mu, &p.moments.mu, 1.0);
        kinv * s * kinv
    };

    // Normalizer terms: g(q) − g(prior) + n·(g(cavity) − g(q)).
    let mut g_k = kinv * -0.5;
    let sep_cavity;
    let cav = if method == Method::Sep {
        let c = gaussian::reconstruct(&prior, Factors::Global(&theta.scaled(cavity_weight(method, n))))?;
        let nf = n as f64;
        g_k += second(q) * (0.5 * (1.0 - nf)) + second(&c) * (0.5 * nf);
        sep_cavity = c;
        &sep_cavity
    } else {
        g_k += second(q) * 0.5;
        q
    };

    // Likelihood terms through m_c = υᵀμ_c, v_c = υᵀΣ_cυ and s.
    let cols = geo.len();
    let spread = &cav.moments.sigma * &geo.upsilon;
    let t = kinv * &cav.moments.mu;
    let d_ups = kinv * &spread - &geo.upsilon;
    let mut alpha = DVector::zeros(cols);
    let mut gamma = DVector::zeros(cols);
    for j in 0..cols {
        let m_c = geo.upsilon.column(j).dot(&cav.moments.mu);
        let v_c = geo.upsilon.column(j).dot(&spread.column(j));
        let tr = tilted_moments(y[j], m_c, v_c, geo.s[j])?;
        let c = v_c + geo.s[j] + 1.0;
        alpha[j] = scale * tr.alpha;
        gamma[j] = scale * (-tr.alpha * m_c / (2.0 * c));
    }
    let mut g_p = &t * alpha.transpose();
    g_p += linalg::scale_columns(&d_ups, &(&gamma * 2.0));
    g_k.ger(1.0, &(&d_ups * &alpha), &t, 1.0);
    g_k += linalg::weighted_gram(&d_ups, &gamma);

    Ok(kernel::pullback(hypers, x, &geo.kuu, &geo.kuf, &g_k, &g_p, &gamma))
}

/// Adaptive-moment ascent state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub steps: u64,
    pub skipped: u64,
}

impl AdamState {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            steps: 0,
            skipped: 0,
        }
    }
}

/// One Adam step in the ascent direction. A non-finite gradient or update
/// leaves the hyperparameters unchanged but still advances the counters.
pub fn opt_step(opt: &AdamState, grad: &HyperGradient, hypers: &HyperParams) -> Result<(AdamState, HyperParams)> {
    let p = hypers.num_params();
    if grad.len() != p || opt.first.len() != p {
        return Err(Error::Dimension {
            context: "optimizer state",
            expected: p,
            found: if grad.len() != p { grad.len() } else { opt.first.len() },
        });
    }
    let mut next = opt.clone();
    next.steps += 1;
    let t = next.steps as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);

    let mut first = opt.first.clone();
    let mut second = opt.second.clone();
    let mut theta = hypers.to_vector();
    for j in 0..p {
        let g = grad.values[j];
        first[j] = opt.beta1 * first[j] + (1.0 - opt.beta1) * g;
        second[j] = opt.beta2 * second[j] + (1.0 - opt.beta2) * g * g;
        theta[j] += opt.learning_rate * (first[j] / bc1) / ((second[j] / bc2).sqrt() + opt.epsilon);
    }
    let updated = if theta.iter().all(|v| v.is_finite()) {
        hypers.with_vector(&theta).ok()
    } else {
        None
    };
    match updated {
        Some(h) => {
            next.first = first;
            next.second = second;
            Ok((next, h))
        }
        None => {
            log::warn!("skipping non-finite hyperparameter step {}", next.steps);
            next.skipped += 1;
            Ok((next, hypers.clone()))
        }
    }
}
