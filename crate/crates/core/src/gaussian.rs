//! Gaussian algebra in natural `(h, Λ)` and moment `(μ, Σ)` form.
//!
//! Densities follow `p(x) ∝ exp(hᵀx − ½ xᵀΛx)`. The prior over inducing
//! values is `(0, K⁻¹)`; an EP site contributes `(μ̃ υ, ν̃ υυᵀ)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Chol};

/// Training scheme for the likelihood factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ep,
    Sep,
    Adf,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ep => "ep",
            Method::Sep => "sep",
            Method::Adf => "adf",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ep" => Ok(Method::Ep),
            "sep" => Ok(Method::Sep),
            "adf" => Ok(Method::Adf),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNatural {
    pub h: DVector<f64>,
    pub lambda: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Scalars of a rank-one factor `s̃ exp(−ν̃ a²/2 + μ̃ a)` with `a = υᵀf̄`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteParams {
    pub nu: f64,
    pub mu_t: f64,
    pub log_s: f64,
}

impl SiteParams {
    pub fn uniform() -> Self {
        Self {
            nu: 0.0,
            mu_t: 0.0,
            log_s: 0.0,
        }
    }
}

impl Default for SiteParams {
    fn default() -> Self {
        Self::uniform()
    }
}

impl GaussianNatural {
    pub fn zeros(m: usize) -> Self {
        Self {
            h: DVector::zeros(m),
            lambda: DMatrix::zeros(m, m),
        }
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    /// Natural parameters of one rank-one site.
    pub fn from_site(upsilon: &DVector<f64>, site: &SiteParams) -> Self {
        Self {
            h: upsilon * site.mu_t,
            lambda: upsilon * upsilon.transpose() * site.nu,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            h: &self.h * c,
            lambda: &self.lambda * c,
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.h += &other.h;
        self.lambda += &other.lambda;
    }

    pub fn add_scaled(&mut self, other: &Self, c: f64) {
        self.h.axpy(c, &other.h, 1.0);
        self.lambda.zip_apply(&other.lambda, |a, b| *a += c * b);
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            h: &self.h - &other.h,
            lambda: &self.lambda - &other.lambda,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.h.iter().chain(self.lambda.iter()).all(|v| *v == 0.0)
    }
}

/// `g(h, Λ) = ½ hᵀΛ⁻¹h − ½ log det Λ + (m/2) log 2π`.
pub fn log_partition(nat: &GaussianNatural) -> Result<f64> {
    let chol = linalg::cholesky(&nat.lambda, "log-partition precision")?;
    Ok(log_partition_with(nat, &chol))
}

fn log_partition_with(nat: &GaussianNatural, chol: &Chol) -> f64 {
    let mu = chol.solve(&nat.h);
    let m = nat.dim() as f64;
    0.5 * nat.h.dot(&mu) - 0.5 * linalg::log_det(chol) + 0.5 * m * (2.0 * PI).ln()
}

pub fn moments(nat: &GaussianNatural) -> Result<GaussianMoments> {
    let chol = linalg::cholesky(&nat.lambda, "natural precision")?;
    Ok(moments_with(nat, &chol))
}

fn moments_with(nat: &GaussianNatural, chol: &Chol) -> GaussianMoments {
    GaussianMoments {
        mu: chol.solve(&nat.h),
        sigma: linalg::spd_inverse(chol),
    }
}

pub fn natural(q: &GaussianMoments) -> Result<GaussianNatural> {
    let chol = linalg::cholesky(&q.sigma, "covariance")?;
    let lambda = linalg::spd_inverse(&chol);
    Ok(GaussianNatural {
        h: &lambda * &q.mu,
        lambda,
    })
}

/// Mean and variance of `a = υᵀx` under `q`.
pub fn marginal_of_projection(q: &GaussianMoments, upsilon: &DVector<f64>) -> Result<(f64, f64)> {
    if upsilon.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateProjection);
    }
    let m_a = upsilon.dot(&q.mu);
    let v_a = upsilon.dot(&(&q.sigma * upsilon));
    if !(v_a > 0.0) {
        return Err(Error::InvalidCavity(v_a));
    }
    Ok((m_a, v_a))
}

/// EP cavity from the q-marginal `(m_a, v_a)` by removing one site.
pub fn ep_cavity(m_a: f64, v_a: f64, site: &SiteParams) -> Result<(f64, f64)> {
    let prec = 1.0 / v_a - site.nu;
    if !(prec > 0.0) || !prec.is_finite() {
        return Err(Error::InvalidCavity(1.0 / prec));
    }
    let v_c = 1.0 / prec;
    Ok((v_c * (m_a / v_a - site.mu_t), v_c))
}

/// Natural parameters of the SEP cavity `q / φ̃^{1/n}`.
pub fn sep_cavity_natural(q: &GaussianNatural, theta: &GaussianNatural, n: usize) -> GaussianNatural {
    let mut c = q.clone();
    if n > 0 {
        c.add_scaled(theta, -1.0 / n as f64);
    }
    c
}

/// 1-D cavity marginal along `upsilon` for any of the three schemes.
///
/// EP needs the instance's current site, SEP the global factor `theta` and
/// the dataset size `n`; ADF uses `q` itself.
pub fn cavity(
    method: Method,
    q: &GaussianMoments,
    site: Option<&SiteParams>,
    theta: Option<&GaussianNatural>,
    upsilon: &DVector<f64>,
    n: usize,
) -> Result<(f64, f64)> {
    match method {
        Method::Ep => {
            let site = site.ok_or_else(|| Error::Config("EP cavity needs the site".into()))?;
            let (m_a, v_a) = marginal_of_projection(q, upsilon)?;
            ep_cavity(m_a, v_a, site)
        }
        Method::Sep => {
            let theta =
                theta.ok_or_else(|| Error::Config("SEP cavity needs the global factor".into()))?;
            let cav = sep_cavity_natural(&natural(q)?, theta, n);
            marginal_of_projection(&moments(&cav)?, upsilon)
        }
        Method::Adf => marginal_of_projection(q, upsilon),
    }
}

/// A Gaussian in natural form with its precision factorized and moments cached.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub nat: GaussianNatural,
    pub chol: Chol,
    pub moments: GaussianMoments,
}

impl Posterior {
    pub fn from_natural(nat: GaussianNatural) -> Result<Self> {
        let chol = linalg::cholesky(&nat.lambda, "posterior precision")?;
        let moments = moments_with(&nat, &chol);
        Ok(Self { nat, chol, moments })
    }

    pub fn log_partition(&self) -> f64 {
        log_partition_with(&self.nat, &self.chol)
    }

    pub fn dim(&self) -> usize {
        self.nat.dim()
    }
}

/// Likelihood factors multiplying the prior.
#[derive(Debug, Clone, Copy)]
pub enum Factors<'a> {
    /// Rank-one EP sites; column `i` of `upsilon` is the direction of site `i`.
    Sites {
        sites: &'a [SiteParams],
        upsilon: &'a DMatrix<f64>,
    },
    /// A single natural-parameter factor (SEP's global factor, or ADF's
    /// accumulated product).
    Global(&'a GaussianNatural),
}

/// Natural parameters of `prior × Π factors`.
pub fn combine(prior: &GaussianNatural, factors: Factors<'_>) -> Result<GaussianNatural> {
    let mut nat = prior.clone();
    match factors {
        Factors::Sites { sites, upsilon } => {
            if upsilon.ncols() != sites.len() {
                return Err(Error::Dimension {
                    context: "site directions",
                    expected: sites.len(),
                    found: upsilon.ncols(),
                });
            }
            let nu = DVector::from_iterator(sites.len(), sites.iter().map(|s| s.nu));
            let mu = DVector::from_iterator(sites.len(), sites.iter().map(|s| s.mu_t));
            nat.lambda += linalg::weighted_gram(upsilon, &nu);
            nat.h += upsilon * mu;
        }
        Factors::Global(theta) => nat.add_assign(theta),
    }
    Ok(nat)
}

/// Rebuild `q` from the prior and the factors.
pub fn reconstruct(prior: &GaussianNatural, factors: Factors<'_>) -> Result<Posterior> {
    Posterior::from_natural(combine(prior, factors)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(m, m) * 0.5
    }

    fn random_vec(rng: &mut ChaCha8Rng, m: usize) -> DVector<f64> {
        DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn log_partition_closed_forms() {
        let std2 = GaussianNatural {
            h: DVector::zeros(2),
            lambda: DMatrix::identity(2, 2),
        };
        assert!((log_partition(&std2).unwrap() - (2.0 * PI).ln()).abs() < 1e-14);
        let one = GaussianNatural {
            h: DVector::from_element(1, 2.0),
            lambda: DMatrix::from_element(1, 1, 4.0),
        };
        let want = 0.5 - 0.5 * 4f64.ln() + 0.5 * (2.0 * PI).ln();
        assert!((log_partition(&one).unwrap() - want).abs() < 1e-14);
        assert!((log_partition(&one).unwrap() - 0.725792).abs() < 1e-6);
    }

    #[test]
    fn log_partition_matches_lu_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let lambda = random_spd(&mut rng, 4);
        let h = random_vec(&mut rng, 4);
        let lu = lambda.clone().lu();
        let mu = lu.solve(&h).unwrap();
        let want = 0.5 * h.dot(&mu) - 0.5 * lu.determinant().ln() + 2.0 * (2.0 * PI).ln();
        let got = log_partition(&GaussianNatural { h, lambda }).unwrap();
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn log_partition_rejects_indefinite() {
        let bad = GaussianNatural {
            h: DVector::zeros(2),
            lambda: DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]),
        };
        assert!(log_partition(&bad).is_err());
        assert!(moments(&bad).is_err());
    }

    #[test]
    fn moments_examples() {
        let q = moments(&GaussianNatural {
            h: DVector::zeros(3),
            lambda: DMatrix::identity(3, 3),
        })
        .unwrap();
        assert_eq!(q.mu, DVector::zeros(3));
        assert!((q.sigma - DMatrix::<f64>::identity(3, 3)).norm() < 1e-15);
        let q = moments(&GaussianNatural {
            h: DVector::from_element(1, 3.0),
            lambda: DMatrix::from_element(1, 1, 2.0),
        })
        .unwrap();
        assert!((q.mu[0] - 1.5).abs() < 1e-15);
        assert!((q.sigma[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn moments_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let nat = GaussianNatural {
            h: random_vec(&mut rng, 5),
            lambda: random_spd(&mut rng, 5),
        };
        let q = moments(&nat).unwrap();
        assert!((&nat.lambda * &q.sigma - DMatrix::<f64>::identity(5, 5)).norm() < 1e-10);
    }

    #[test]
    fn marginal_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let q = GaussianMoments {
            mu: random_vec(&mut rng, 3),
            sigma: random_spd(&mut rng, 3),
        };
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let (m, v) = marginal_of_projection(&q, &e1).unwrap();
        assert_eq!((m, v), (q.mu[0], q.sigma[(0, 0)]));
        assert!(matches!(
            marginal_of_projection(&q, &DVector::zeros(3)),
            Err(Error::DegenerateProjection)
        ));
        let u = random_vec(&mut rng, 3);
        let (m, v) = marginal_of_projection(&q, &u).unwrap();
        let mut want_v = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                want_v += u[a] * q.sigma[(a, b)] * u[b];
            }
        }
        assert!((m - u.dot(&q.mu)).abs() < 1e-15);
        assert!((v - want_v).abs() < 1e-14);
    }

    #[test]
    fn cavity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let q = GaussianMoments {
            mu: random_vec(&mut rng, 3),
            sigma: random_spd(&mut rng, 3),
        };
        let u = random_vec(&mut rng, 3);
        let marg = marginal_of_projection(&q, &u).unwrap();
        let ep = cavity(Method::Ep, &q, Some(&SiteParams::uniform()), None, &u, 10).unwrap();
        assert_eq!(ep, marg);
        let sep = cavity(Method::Sep, &q, None, Some(&GaussianNatural::zeros(3)), &u, 10).unwrap();
        assert!((sep.0 - marg.0).abs() < 1e-12 && (sep.1 - marg.1).abs() < 1e-12);
        let adf = cavity(Method::Adf, &q, None, None, &u, 10).unwrap();
        assert_eq!(adf, marg);

        let site = SiteParams {
            nu: 0.2,
            mu_t: 0.1,
            log_s: 0.0,
        };
        let (m_c, v_c) = ep_cavity(0.5, 1.0, &site).unwrap();
        assert!((v_c - 1.25).abs() < 1e-15);
        assert!((m_c - 0.5).abs() < 1e-15);

        let greedy = SiteParams {
            nu: 2.0,
            mu_t: 0.0,
            log_s: 0.0,
        };
        assert!(matches!(ep_cavity(0.0, 1.0, &greedy), Err(Error::InvalidCavity(_))));
        assert!(cavity(Method::Ep, &q, None, None, &u, 1).is_err());
    }

    #[test]
    fn sep_cavity_removes_one_nth() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let prior = GaussianNatural {
            h: DVector::zeros(3),
            lambda: random_spd(&mut rng, 3),
        };
        let u = random_vec(&mut rng, 3);
        let theta = GaussianNatural::from_site(
            &u,
            &SiteParams {
                nu: 0.8,
                mu_t: -0.3,
                log_s: 0.0,
            },
        );
        let q = combine(&prior, Factors::Global(&theta)).unwrap();
        let cav = sep_cavity_natural(&q, &theta, 4);
        let mut want = prior.clone();
        want.add_scaled(&theta, 0.75);
        assert!((cav.lambda - want.lambda).norm() < 1e-14);
        assert!((cav.h - want.h).norm() < 1e-14);
    }

    #[test]
    fn reconstruct_empty_is_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let prior = GaussianNatural {
            h: DVector::zeros(3),
            lambda: random_spd(&mut rng, 3),
        };
        let none = DMatrix::zeros(3, 0);
        let a = reconstruct(&prior, Factors::Sites { sites: &[], upsilon: &none }).unwrap();
        let b = reconstruct(&prior, Factors::Global(&GaussianNatural::zeros(3))).unwrap();
        assert_eq!(a.nat, prior);
        assert_eq!(b.nat, prior);
    }

    #[test]
    fn reconstruct_single_site_matches_dense_inverse() {
        let k = DMatrix::from_row_slice(2, 2, &[1.3, 0.4, 0.4, 0.9]);
        let kinv = k.clone().try_inverse().unwrap();
        let prior = GaussianNatural {
            h: DVector::zeros(2),
            lambda: kinv.clone(),
        };
        let u = DMatrix::from_column_slice(2, 1, &[0.7, -0.2]);
        let site = [SiteParams {
            nu: 0.6,
            mu_t: 0.5,
            log_s: 0.0,
        }];
        let q = reconstruct(&prior, Factors::Sites { sites: &site, upsilon: &u }).unwrap();
        let uv = u.column(0).into_owned();
        let dense = (kinv + &uv * uv.transpose() * 0.6).try_inverse().unwrap();
        assert!((&q.moments.sigma - &dense).norm() < 1e-10);
        assert!((&q.moments.mu - &dense * &uv * 0.5).norm() < 1e-10);
    }

    fn site_strategy(m: usize) -> impl Strategy<Value = Vec<(Vec<f64>, f64, f64)>> {
        prop::collection::vec(
            (prop::collection::vec(-1.0..1.0f64, m), 0.0..2.0f64, -1.0..1.0f64),
            1..12,
        )
    }

    proptest! {
        #[test]
        fn ep_and_global_reconstruction_agree(sites in site_strategy(3), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prior = GaussianNatural { h: DVector::zeros(3), lambda: random_spd(&mut rng, 3) };
            let n = sites.len();
            let upsilon = DMatrix::from_fn(3, n, |a, i| sites[i].0[a]);
            let params: Vec<SiteParams> =
                sites.iter().map(|s| SiteParams { nu: s.1, mu_t: s.2, log_s: 0.0 }).collect();
            let mut theta = GaussianNatural::zeros(3);
            for (i, p) in params.iter().enumerate() {
                theta.add_assign(&GaussianNatural::from_site(&upsilon.column(i).into_owned(), p));
            }
            let ep = reconstruct(&prior, Factors::Sites { sites: &params, upsilon: &upsilon }).unwrap();
            let sep = reconstruct(&prior, Factors::Global(&theta)).unwrap();
            let scale = ep.moments.sigma.norm();
            prop_assert!((&ep.moments.sigma - &sep.moments.sigma).norm() <= 1e-10 * scale);
            prop_assert!((&ep.moments.mu - &sep.moments.mu).norm() <= 1e-10 * (1.0 + ep.moments.mu.norm()));

            // Reversed site order.
            let rev: Vec<SiteParams> = params.iter().rev().copied().collect();
            let urev = DMatrix::from_fn(3, n, |a, i| upsilon[(a, n - 1 - i)]);
            let back = reconstruct(&prior, Factors::Sites { sites: &rev, upsilon: &urev }).unwrap();
            prop_assert!((&back.moments.sigma - &ep.moments.sigma).norm() <= 1e-10 * scale);
        }

        #[test]
        fn natural_and_moments_are_inverse(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nat = GaussianNatural { h: random_vec(&mut rng, 4), lambda: random_spd(&mut rng, 4) };
            let back = natural(&moments(&nat).unwrap()).unwrap();
            prop_assert!((&back.lambda - &nat.lambda).norm() <= 1e-10 * nat.lambda.norm());
            prop_assert!((&back.h - &nat.h).norm() <= 1e-10 * (1.0 + nat.h.norm()));
        }
    }
}
