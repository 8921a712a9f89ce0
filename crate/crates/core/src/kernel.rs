//! ARD squared-exponential covariance over inducing points and data.
//!
//! `k(x, x') = σ² exp(−½ Σ_k (x_k − x'_k)² / ℓ_k²)`, with length-scales and
//! amplitude stored in log space. The flat trainable-parameter layout is
//! `[log ℓ_1 … log ℓ_d, log σ², x̄_11 … x̄_1d, …, x̄_m1 … x̄_md]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, Chol};

/// Relative jitter floor and ceiling, as multiples of σ².
pub const JITTER_START: f64 = 1e-6;
pub const JITTER_MAX: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub log_lengthscales: DVector<f64>,
    pub log_amplitude: f64,
    /// Inducing inputs, one per row (m×d).
    pub inducing_points: DMatrix<f64>,
    /// Absolute diagonal jitter added to the inducing gram matrix.
    pub jitter: f64,
}

/// One trainable coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperIndex {
    LogLengthscale(usize),
    LogAmplitude,
    Inducing { point: usize, dim: usize },
}

#[derive(Debug, Clone)]
pub struct GramResult {
    /// `K_ūū + jitter·I`.
    pub gram: DMatrix<f64>,
    pub chol: Chol,
    /// Jitter actually used (may exceed the requested one after escalation).
    pub jitter: f64,
}

/// Partial derivatives of the three covariance blocks for one coordinate.
#[derive(Debug, Clone)]
pub struct KernelDerivative {
    pub d_gram: DMatrix<f64>,
    pub d_cross: DMatrix<f64>,
    pub d_diag: DVector<f64>,
}

impl HyperParams {
    pub fn new(
        log_lengthscales: DVector<f64>,
        log_amplitude: f64,
        inducing_points: DMatrix<f64>,
        jitter: f64,
    ) -> Result<Self> {
        let h = Self {
            log_lengthscales,
            log_amplitude,
            inducing_points,
            jitter,
        };
        h.validate()?;
        Ok(h)
    }

    /// Isotropic initialization with the default relative jitter.
    pub fn isotropic(lengthscale: f64, amplitude: f64, inducing_points: DMatrix<f64>) -> Result<Self> {
        if !(lengthscale > 0.0 && amplitude > 0.0) {
            return Err(Error::InvalidHypers(
                "length-scale and amplitude must be positive".into(),
            ));
        }
        let d = inducing_points.ncols();
        Self::new(
            DVector::from_element(d, lengthscale.ln()),
            amplitude.ln(),
            inducing_points,
            JITTER_START * amplitude,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.log_lengthscales.len();
        if d == 0 || self.inducing_points.nrows() == 0 {
            return Err(Error::InvalidHypers("need d ≥ 1 and m ≥ 1".into()));
        }
        if self.inducing_points.ncols() != d {
            return Err(Error::Dimension {
                context: "inducing points",
                expected: d,
                found: self.inducing_points.ncols(),
            });
        }
        if !(self.jitter > 0.0 && self.jitter.is_finite()) {
            return Err(Error::InvalidHypers("jitter must be positive".into()));
        }
        let finite = self.log_lengthscales.iter().all(|v| v.is_finite())
            && self.log_amplitude.is_finite()
            && self.inducing_points.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidHypers("non-finite value".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing_points.nrows()
    }

    pub fn amplitude(&self) -> f64 {
        self.log_amplitude.exp()
    }

    pub fn lengthscales(&self) -> DVector<f64> {
        self.log_lengthscales.map(f64::exp)
    }

    /// `d + 1 + m·d`.
    pub fn num_params(&self) -> usize {
        self.dim() + 1 + self.num_inducing() * self.dim()
    }

    pub fn index(&self, j: usize) -> Result<HyperIndex> {
        let d = self.dim();
        let count = self.num_params();
        if j >= count {
            return Err(Error::InvalidIndex { index: j, count });
        }
        Ok(if j < d {
            HyperIndex::LogLengthscale(j)
        } else if j == d {
            HyperIndex::LogAmplitude
        } else {
            let r = j - d - 1;
            HyperIndex::Inducing {
                point: r / d,
                dim: r % d,
            }
        })
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend(self.log_lengthscales.iter());
        v.push(self.log_amplitude);
        for a in 0..self.num_inducing() {
            v.extend(self.inducing_points.row(a).iter());
        }
        v
    }

    /// Same jitter and shapes, new trainable values.
    pub fn with_vector(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.num_params() {
            return Err(Error::Dimension {
                context: "hyperparameter vector",
                expected: self.num_params(),
                found: v.len(),
            });
        }
        let d = self.dim();
        let m = self.num_inducing();
        let h = Self {
            log_lengthscales: DVector::from_column_slice(&v[..d]),
            log_amplitude: v[d],
            inducing_points: DMatrix::from_row_slice(m, d, &v[d + 1..]),
            jitter: self.jitter,
        };
        h.validate()?;
        Ok(h)
    }

    /// Inverse squared length-scales `1/ℓ_k²`.
    fn precisions(&self) -> DVector<f64> {
        self.log_lengthscales.map(|l| (-2.0 * l).exp())
    }

    /// Scalar kernel evaluation.
    pub fn eval(&self, x: &[f64], z: &[f64]) -> f64 {
        let prec = self.precisions();
        self.amplitude() * (-0.5 * scaled_sqdist(x, z, prec.as_slice())).exp()
    }
}

fn scaled_sqdist(x: &[f64], z: &[f64], prec: &[f64]) -> f64 {
    x.iter()
        .zip(z)
        .zip(prec)
        .map(|((a, b), p)| (a - b) * (a - b) * p)
        .sum()
}

fn rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| a.row(i).iter().copied().collect())
        .collect()
}

/// Kernel block between two row sets, no jitter.
fn kernel_block(h: &HyperParams, left: &DMatrix<f64>, right: &DMatrix<f64>) -> DMatrix<f64> {
    let prec = h.precisions();
    let amp = h.amplitude();
    let l = rows(left);
    let r = rows(right);
    DMatrix::from_fn(l.len(), r.len(), |i, j| {
        amp * (-0.5 * scaled_sqdist(&l[i], &r[j], prec.as_slice())).exp()
    })
}

/// `K_ūū` without jitter.
pub fn inducing_kernel(h: &HyperParams) -> DMatrix<f64> {
    kernel_block(h, &h.inducing_points, &h.inducing_points)
}

/// Gram matrix of the inducing points with jitter and its Cholesky factor.
///
/// When the factorization fails the jitter is raised tenfold, up to
/// `JITTER_MAX·σ²`; past that the inducing set is reported as ill-conditioned.
pub fn gram(h: &HyperParams) -> Result<GramResult> {
    h.validate()?;
    let kernel = inducing_kernel(h);
    gram_from_kernel(&kernel, h.jitter, h.amplitude())
}

pub(crate) fn gram_from_kernel(kernel: &DMatrix<f64>, jitter: f64, amplitude: f64) -> Result<GramResult> {
    let m = kernel.nrows();
    let ceiling = JITTER_MAX * amplitude * (1.0 + 1e-12);
    let mut jitter = jitter;
    loop {
        let mut g = kernel.clone();
        for a in 0..m {
            g[(a, a)] += jitter;
        }
        if let Ok(chol) = linalg::cholesky(&g, "inducing gram") {
            return Ok(GramResult {
                gram: g,
                chol,
                jitter,
            });
        }
        jitter *= 10.0;
        if jitter > ceiling {
            return Err(Error::IllConditioned { jitter: jitter / 10.0 });
        }
        log::warn!("inducing gram not positive definite, raising jitter to {jitter:e}");
    }
}

/// Cross covariances `K_fū` (n×m) and the data-side prior variances (σ², no jitter).
pub fn cross_and_diag(x: &DMatrix<f64>, h: &HyperParams) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_inputs(x, h)?;
    Ok((
        kernel_block(h, x, &h.inducing_points),
        DVector::from_element(x.nrows(), h.amplitude()),
    ))
}

/// Cross covariances in inducing-major layout, `K_ūf` (m×n).
pub fn cross_transposed(x: &DMatrix<f64>, h: &HyperParams) -> Result<DMatrix<f64>> {
    check_inputs(x, h)?;
    Ok(kernel_block(h, &h.inducing_points, x))
}

fn check_inputs(x: &DMatrix<f64>, h: &HyperParams) -> Result<()> {
    if x.ncols() != h.dim() {
        return Err(Error::Dimension {
            context: "input columns",
            expected: h.dim(),
            found: x.ncols(),
        });
    }
    Ok(())
}

/// Exact partial derivatives of the gram, cross and diagonal blocks with
/// respect to the `j`-th trainable coordinate. Jitter is held constant.
pub fn kernel_grad(h: &HyperParams, j: usize, x: &DMatrix<f64>) -> Result<KernelDerivative> {
    let idx = h.index(j)?;
    check_inputs(x, h)?;
    let kuu = inducing_kernel(h);
    let (kfu, kdiag) = cross_and_diag(x, h)?;
    let z = &h.inducing_points;
    let prec = h.precisions();
    let (m, n) = (h.num_inducing(), x.nrows());
    Ok(match idx {
        HyperIndex::LogAmplitude => KernelDerivative {
            d_gram: kuu,
            d_cross: kfu,
            d_diag: kdiag,
        },
        HyperIndex::LogLengthscale(k) => KernelDerivative {
            d_gram: DMatrix::from_fn(m, m, |a, b| {
                kuu[(a, b)] * (z[(a, k)] - z[(b, k)]).powi(2) * prec[k]
            }),
            d_cross: DMatrix::from_fn(n, m, |i, a| {
                kfu[(i, a)] * (x[(i, k)] - z[(a, k)]).powi(2) * prec[k]
            }),
            d_diag: DVector::zeros(n),
        },
        HyperIndex::Inducing { point, dim } => {
            let mut d_gram = DMatrix::zeros(m, m);
            for b in 0..m {
                if b != point {
                    let v = kuu[(point, b)] * (z[(b, dim)] - z[(point, dim)]) * prec[dim];
                    d_gram[(point, b)] = v;
                    d_gram[(b, point)] = v;
                }
            }
            let mut d_cross = DMatrix::zeros(n, m);
            for i in 0..n {
                d_cross[(i, point)] =
                    kfu[(i, point)] * (x[(i, dim)] - z[(point, dim)]) * prec[dim];
            }
            KernelDerivative {
                d_gram,
                d_cross,
                d_diag: DVector::zeros(n),
            }
        }
    })
}

/// Chain rule from block adjoints to the flat trainable-parameter gradient.
///
/// Given `∂F/∂K_ūū` (`g_kuu`, m×m, any symmetry), `∂F/∂K_ūf` (`g_kuf`, m×n)
/// and `∂F/∂diag K_ff` (`g_diag`), returns `∂F/∂ξ` for every coordinate in
/// O((m² + mn)·d) time. `kuu` is the gram without jitter and `kuf` the
/// cross block for `x`.
pub fn pullback(
    h: &HyperParams,
    x: &DMatrix<f64>,
    kuu: &DMatrix<f64>,
    kuf: &DMatrix<f64>,
    g_kuu: &DMatrix<f64>,
    g_kuf: &DMatrix<f64>,
    g_diag: &DVector<f64>,
) -> Vec<f64> {
    let d = h.dim();
    let m = h.num_inducing();
    let n = x.nrows();
    let z = &h.inducing_points;
    let prec = h.precisions();
    let mut grad = vec![0.0; h.num_params()];

    // Elementwise products carry every dependence except the distance factors.
    let wu = g_kuu.component_mul(kuu);
    let wf = g_kuf.component_mul(kuf);

    grad[d] = wu.sum() + wf.sum() + g_diag.sum() * h.amplitude();

    // Squared differences expand into row/column sums and the products
    // `(W_ū + W_ūᵀ) Z̄` and `W_f X`, which keeps everything in matrix products.
    let wu_sym = &wu + wu.transpose();
    let wu_rows = wu_sym.column_sum();
    let wf_rows = wf.column_sum();
    let wf_cols = wf.row_sum();
    let wu_z = &wu_sym * z;
    let wf_x = &wf * x;

    for k in 0..d {
        let zk = z.column(k);
        let xk = x.column(k);
        let mut acc = 0.0;
        for a in 0..m {
            let za = zk[a];
            acc += wu_rows[a] * za * za - za * wu_z[(a, k)];
            acc += wf_rows[a] * za * za - 2.0 * za * wf_x[(a, k)];
        }
        for i in 0..n {
            acc += wf_cols[i] * xk[i] * xk[i];
        }
        grad[k] = acc * prec[k];
    }

    for a in 0..m {
        for k in 0..d {
            let za = z[(a, k)];
            let acc = wu_z[(a, k)] - wu_rows[a] * za + wf_x[(a, k)] - wf_rows[a] * za;
            grad[d + 1 + a * d + k] = acc * prec[k];
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::fd_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.5..1.5))
    }

    fn random_hypers(rng: &mut ChaCha8Rng, m: usize, d: usize) -> HyperParams {
        HyperParams::new(
            DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5)),
            rng.random_range(-0.5..0.5),
            random_matrix(rng, m, d),
            1e-6,
        )
        .unwrap()
    }

    /// Per-entry reference written straight from the kernel definition.
    fn scalar_kernel(h: &HyperParams, x: &[f64], z: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for k in 0..x.len() {
            let l = h.log_lengthscales[k].exp();
            r2 += ((x[k] - z[k]) / l).powi(2);
        }
        h.log_amplitude.exp() * (-0.5 * r2).exp()
    }

    #[test]
    fn single_point_gram() {
        let h = HyperParams::new(
            DVector::from_element(1, 0.0),
            0.0,
            DMatrix::from_element(1, 1, 0.3),
            1e-6,
        )
        .unwrap();
        let g = gram(&h).unwrap();
        assert_eq!(g.gram[(0, 0)], 1.000001);
    }

    #[test]
    fn coincident_inducing_points() {
        let amp: f64 = 2.5;
        let z = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.1, 0.2]);
        let h = HyperParams::new(DVector::from_element(2, 0.3), amp.ln(), z, 1e-6).unwrap();
        let g = gram(&h).unwrap();
        assert!((g.gram[(0, 1)] - amp).abs() < 1e-14);
        assert!((g.gram[(0, 0)] - (amp + 1e-6)).abs() < 1e-14);
    }

    #[test]
    fn gram_and_cross_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_hypers(&mut rng, 3, 2);
        let g = gram(&h).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let za: Vec<f64> = h.inducing_points.row(a).iter().copied().collect();
                let zb: Vec<f64> = h.inducing_points.row(b).iter().copied().collect();
                let want = scalar_kernel(&h, &za, &zb) + if a == b { h.jitter } else { 0.0 };
                assert!((g.gram[(a, b)] - want).abs() <= 1e-14 * want.abs().max(1.0));
            }
        }
        let x = random_matrix(&mut rng, 5, 2);
        let (kfu, kdiag) = cross_and_diag(&x, &h).unwrap();
        for i in 0..5 {
            assert_eq!(kdiag[i], h.amplitude());
            for a in 0..3 {
                let xi: Vec<f64> = x.row(i).iter().copied().collect();
                let za: Vec<f64> = h.inducing_points.row(a).iter().copied().collect();
                let want = scalar_kernel(&h, &xi, &za);
                assert!((kfu[(i, a)] - want).abs() <= 1e-14 * want.abs().max(1.0));
            }
        }
        let llt = g.chol.l() * g.chol.l().transpose();
        assert!((llt - &g.gram).norm() / g.gram.norm() < 1e-10);
    }

    #[test]
    fn cross_limits() {
        let h = HyperParams::new(
            DVector::from_element(2, 0.0),
            1.2f64.ln(),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, -1.0]),
            1e-6,
        )
        .unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 1e3, 1e3]);
        let (kfu, _) = cross_and_diag(&x, &h).unwrap();
        assert!((kfu[(0, 1)] - 1.2).abs() < 1e-15);
        assert_eq!(kfu[(1, 0)], 0.0);
        assert_eq!(kfu[(1, 1)], 0.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_hypers(&mut rng, 3, 2);
        let x = random_matrix(&mut rng, 4, 3);
        assert!(matches!(cross_and_diag(&x, &h), Err(Error::Dimension { .. })));
        assert!(matches!(
            kernel_grad(&h, h.num_params(), &random_matrix(&mut rng, 4, 2)),
            Err(Error::InvalidIndex { .. })
        ));
    }

    #[test]
    fn amplitude_derivative_is_gram_without_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_hypers(&mut rng, 4, 2);
        let x = random_matrix(&mut rng, 3, 2);
        let dk = kernel_grad(&h, 2, &x).unwrap();
        let g = gram(&h).unwrap();
        let expect = g.gram - DMatrix::identity(4, 4) * h.jitter;
        assert!((dk.d_gram - expect).norm() < 1e-14);
        assert_eq!(dk.d_diag, DVector::from_element(3, h.amplitude()));
    }

    #[test]
    fn inducing_derivative_is_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_hypers(&mut rng, 4, 2);
        let x = random_matrix(&mut rng, 3, 2);
        let j = h.num_params() - 3; // point 2, dim 1
        assert_eq!(h.index(j).unwrap(), HyperIndex::Inducing { point: 2, dim: 1 });
        let dk = kernel_grad(&h, j, &x).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                if a != 2 && b != 2 {
                    assert_eq!(dk.d_gram[(a, b)], 0.0);
                }
            }
        }
        for i in 0..3 {
            for a in 0..4 {
                if a != 2 {
                    assert_eq!(dk.d_cross[(i, a)], 0.0);
                }
            }
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_hypers(&mut rng, 3, 2);
        let x = random_matrix(&mut rng, 4, 2);
        let base = h.to_vector();
        for j in 0..h.num_params() {
            let dk = kernel_grad(&h, j, &x).unwrap();
            for (a, b) in [(0, 1), (1, 2), (0, 0)] {
                let f = |v: &[f64]| inducing_kernel(&h.with_vector(v).unwrap())[(a, b)];
                let fd = fd_gradient(f, &base, 1e-6).unwrap()[j];
                check_close(dk.d_gram[(a, b)], fd);
            }
            for (i, a) in [(0, 0), (3, 2), (2, 1)] {
                let f = |v: &[f64]| {
                    cross_and_diag(&x, &h.with_vector(v).unwrap()).unwrap().0[(i, a)]
                };
                let fd = fd_gradient(f, &base, 1e-6).unwrap()[j];
                check_close(dk.d_cross[(i, a)], fd);
            }
            let f = |v: &[f64]| cross_and_diag(&x, &h.with_vector(v).unwrap()).unwrap().1[1];
            check_close(dk.d_diag[1], fd_gradient(f, &base, 1e-6).unwrap()[j]);
        }
    }

    fn check_close(analytic: f64, fd: f64) {
        let scale = analytic.abs().max(fd.abs());
        if scale < 1e-9 {
            return;
        }
        assert!(
            (analytic - fd).abs() / scale < 1e-5,
            "analytic {analytic} vs fd {fd}"
        );
    }

    #[test]
    fn pullback_matches_per_index_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = random_hypers(&mut rng, 3, 2);
        let x = random_matrix(&mut rng, 5, 2);
        let g_kuu = random_matrix(&mut rng, 3, 3);
        let g_kfu = random_matrix(&mut rng, 5, 3);
        let g_diag = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let kuu = inducing_kernel(&h);
        let kuf = cross_transposed(&x, &h).unwrap();
        let fast = pullback(&h, &x, &kuu, &kuf, &g_kuu, &g_kfu.transpose(), &g_diag);
        for (j, &v) in fast.iter().enumerate() {
            let dk = kernel_grad(&h, j, &x).unwrap();
            let slow = linalg::frobenius_inner(&g_kuu, &dk.d_gram)
                + linalg::frobenius_inner(&g_kfu, &dk.d_cross)
                + g_diag.dot(&dk.d_diag);
            assert!((v - slow).abs() < 1e-12 * slow.abs().max(1.0), "{j}: {v} vs {slow}");
        }
    }

    #[test]
    fn permuting_inducing_points_permutes_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = random_hypers(&mut rng, 4, 3);
        let perm = [2usize, 0, 3, 1];
        let mut hp = h.clone();
        for (new, &old) in perm.iter().enumerate() {
            hp.inducing_points
                .set_row(new, &h.inducing_points.row(old));
        }
        let g = gram(&h).unwrap().gram;
        let gp = gram(&hp).unwrap().gram;
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(gp[(a, b)], g[(perm[a], perm[b])]);
            }
        }
    }

    #[test]
    fn jitter_escalates_on_duplicate_points() {
        // Three identical points with tiny jitter: PD only thanks to jitter,
        // so factorization succeeds at the requested level.
        let z = DMatrix::from_row_slice(3, 1, &[0.5, 0.5, 0.5]);
        let h = HyperParams::new(DVector::from_element(1, 0.0), 0.0, z, 1e-6).unwrap();
        let g = gram(&h).unwrap();
        assert!(g.jitter >= 1e-6);
        // A kernel matrix that is indefinite by more than the jitter ceiling
        // cannot be rescued.
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            gram_from_kernel(&bad, 1e-6, 1.0),
            Err(Error::IllConditioned { .. })
        ));
        let nearly = DMatrix::from_row_slice(2, 2, &[1.0, 1.0 + 1e-4, 1.0 + 1e-4, 1.0]);
        let g = gram_from_kernel(&nearly, 1e-6, 1.0).unwrap();
        assert!(g.jitter > 1e-6 && g.jitter <= 1e-2);
    }
}
