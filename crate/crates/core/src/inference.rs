//! Training loops for parallel EP, SEP and ADF, in batch and minibatch mode.
//!
//! Every update reads one frozen snapshot of `q`, projects each selected
//! instance independently, and then combines the new factors in index order:
//!
//! * EP replaces the selected sites and rebuilds `q` from all `n` of them.
//! * SEP rescales the global factor, `θ ← θ·(n − s)/n + Σ_{i∈M} θ_i`, and
//!   rebuilds `q = prior + θ`.
//! * ADF adds the new site naturals straight into `q`.
//!
//! A batch pass is the `M = {1..n}` case of the same update.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fitc::{self, Geometry, Prediction};
use crate::gaussian::{self, Factors, GaussianMoments, GaussianNatural, Method, Posterior, SiteParams};
use crate::hypergrad::{self, AdamState, FixedFactors};
use crate::kernel::{self, HyperParams};
use crate::linalg;
use crate::sites::{site_update, tilted_moments};

/// Damping used when none is configured.
pub const DEFAULT_BATCH_DAMPING: f64 = 0.8;
pub const DEFAULT_MINIBATCH_DAMPING: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    /// Number of inducing points `m`.
    pub num_inducing: usize,
    /// Minibatch size `s`; `None` selects batch mode.
    pub minibatch: Option<usize>,
    /// Passes in batch mode, epochs in minibatch mode.
    pub iterations: usize,
    /// Convex damping `ρ ∈ (0, 1]`; `None` picks the mode's default.
    pub damping: Option<f64>,
    pub learn_hypers: bool,
    pub learning_rate: f64,
    pub seed: u64,
    /// Absolute jitter for the inducing gram; `None` means `10⁻⁶·σ²`.
    pub jitter: Option<f64>,
    /// Keep the projection weights between updates while the kernel is fixed.
    pub cache_upsilon: bool,
    /// Minibatches between trace records.
    pub trace_every: usize,
}

impl TrainConfig {
    pub fn batch(method: Method, num_inducing: usize, iterations: usize) -> Self {
        Self {
            method,
            num_inducing,
            minibatch: None,
            iterations,
            damping: None,
            learn_hypers: true,
            learning_rate: 0.01,
            seed: 0,
            jitter: None,
            cache_upsilon: false,
            trace_every: 25,
        }
    }

    pub fn minibatch(method: Method, num_inducing: usize, size: usize, epochs: usize) -> Self {
        Self {
            minibatch: Some(size),
            ..Self::batch(method, num_inducing, epochs)
        }
    }

    pub fn damping(&self) -> f64 {
        self.damping.unwrap_or(match self.minibatch {
            Some(_) => DEFAULT_MINIBATCH_DAMPING,
            None => DEFAULT_BATCH_DAMPING,
        })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.num_inducing == 0 {
            return Err(Error::Config("need at least one inducing point".into()));
        }
        if self.num_inducing > n {
            return Err(Error::Config(format!(
                "{} inducing points requested from {n} training rows",
                self.num_inducing
            )));
        }
        if let Some(s) = self.minibatch {
            if s == 0 || s > n {
                return Err(Error::Config(format!("minibatch size {s} outside 1..={n}")));
            }
        }
        let rho = self.damping();
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Config(format!("damping {rho} outside (0, 1]")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if let Some(j) = self.jitter {
            if !(j > 0.0 && j.is_finite()) {
                return Err(Error::Config("jitter must be positive".into()));
            }
        }
        if self.trace_every == 0 {
            return Err(Error::Config("trace interval must be positive".into()));
        }
        Ok(())
    }
}

/// Method-specific factor storage.
#[derive(Debug, Clone, PartialEq)]
pub enum FactorState {
    Ep(Vec<SiteParams>),
    Sep(GaussianNatural),
    Adf,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub method: Method,
    pub hypers: HyperParams,
    /// Posterior over inducing values, natural form.
    pub q_nat: GaussianNatural,
    pub factors: FactorState,
    /// Training-set size the factors refer to.
    pub n: usize,
    /// Completed factor updates (passes or minibatches).
    pub step: u64,
    pub opt: AdamState,
    pub cache_upsilon: bool,
    cache: Option<Geometry>,
    /// Factorization of the last posterior built here; used only while it
    /// still matches `q_nat`.
    factored: Option<Posterior>,
}

/// Stored parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    /// Likelihood-factor scalars (EP sites or SEP's global factor).
    pub factor: usize,
    /// Cached projection weights.
    pub cache: usize,
    pub posterior: usize,
    pub hypers: usize,
}

impl MemoryFootprint {
    pub fn total(&self) -> usize {
        self.factor + self.cache + self.posterior + self.hypers
    }
}

/// `m(m+1)/2 + m` scalars of a Gaussian over `m` values.
fn gaussian_count(m: usize) -> usize {
    m * (m + 1) / 2 + m
}

impl ModelState {
    /// Uniform factors, so `q` equals the prior.
    pub fn new(method: Method, hypers: HyperParams, n: usize, learning_rate: f64) -> Result<Self> {
        let gram = kernel::gram(&hypers)?;
        let m = hypers.num_inducing();
        let q_nat = GaussianNatural {
            h: DVector::zeros(m),
            lambda: linalg::spd_inverse(&gram.chol),
        };
        let factors = match method {
            Method::Ep => FactorState::Ep(vec![SiteParams::uniform(); n]),
            Method::Sep => FactorState::Sep(GaussianNatural::zeros(m)),
            Method::Adf => FactorState::Adf,
        };
        let opt = AdamState::new(hypers.num_params(), learning_rate);
        Ok(Self {
            method,
            hypers,
            q_nat,
            factors,
            n,
            step: 0,
            opt,
            cache_upsilon: false,
            cache: None,
            factored: None,
        })
    }

    pub fn sites(&self) -> Option<&[SiteParams]> {
        match &self.factors {
            FactorState::Ep(s) => Some(s),
            _ => None,
        }
    }

    pub fn theta(&self) -> Option<&GaussianNatural> {
        match &self.factors {
            FactorState::Sep(t) => Some(t),
            _ => None,
        }
    }

    pub fn posterior(&self) -> Result<Posterior> {
        Posterior::from_natural(self.q_nat.clone())
    }

    fn current_posterior(&self) -> Result<Posterior> {
        match &self.factored {
            Some(q) if q.nat == self.q_nat => Ok(q.clone()),
            _ => self.posterior(),
        }
    }

    fn set_posterior(&mut self, q: &Posterior) {
        self.q_nat = q.nat.clone();
        self.factored = Some(q.clone());
    }

    pub fn moments(&self) -> Result<GaussianMoments> {
        Ok(self.posterior()?.moments)
    }

    /// Factors as seen by the energy, with ADF's accumulated factor
    /// recovered as `q − prior`.
    pub fn fixed_factors(&self) -> Result<FixedFactors> {
        Ok(match &self.factors {
            FactorState::Ep(s) => FixedFactors::Sites(s.clone()),
            FactorState::Sep(t) => FixedFactors::Global(t.clone()),
            FactorState::Adf => {
                let gram = kernel::gram(&self.hypers)?;
                FixedFactors::Global(GaussianNatural {
                    h: self.q_nat.h.clone(),
                    lambda: &self.q_nat.lambda - linalg::spd_inverse(&gram.chol),
                })
            }
        })
    }

    pub fn memory_footprint(&self) -> MemoryFootprint {
        let m = self.hypers.num_inducing();
        let (factor, cache) = match self.method {
            Method::Ep => (3 * self.n, if self.cache_upsilon { self.n * m } else { 0 }),
            Method::Sep => (gaussian_count(m), 0),
            Method::Adf => (0, 0),
        };
        MemoryFootprint {
            factor,
            cache,
            posterior: gaussian_count(m),
            hypers: self.hypers.num_params(),
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<Prediction>> {
        let gram = kernel::gram(&self.hypers)?;
        fitc::predict_batch(&self.moments()?, &gram, &self.hypers, x)
    }

    /// Mean test NLL and error rate.
    pub fn evaluate(&self, test: &Dataset) -> Result<(f64, f64)> {
        Ok(fitc::test_metrics(&self.predict(&test.x)?, &test.y))
    }

    /// Moves to new kernel parameters keeping the stored factors. EP site
    /// scalars are reinterpreted along the new projection directions.
    pub fn set_hypers(&mut self, hypers: HyperParams, data: &Dataset) -> Result<()> {
        let old_kinv = match self.method {
            Method::Adf => Some(linalg::spd_inverse(&kernel::gram(&self.hypers)?.chol)),
            _ => None,
        };
        self.cache = None;
        self.opt_resize(&hypers);
        self.hypers = hypers;
        match &mut self.factors {
            FactorState::Ep(_) => {
                // Handed to the next pass whether or not caching is on.
                let geo = Geometry::new(&self.hypers, &data.x, None)?;
                self.rebuild_ep(&geo)?;
                self.cache = Some(geo);
            }
            FactorState::Sep(theta) => {
                let geo_gram = kernel::gram(&self.hypers)?;
                let mut nat = theta.clone();
                nat.lambda += linalg::spd_inverse(&geo_gram.chol);
                self.set_posterior(&Posterior::from_natural(nat)?);
            }
            FactorState::Adf => {
                let gram = kernel::gram(&self.hypers)?;
                let mut nat = self.q_nat.clone();
                nat.lambda += linalg::spd_inverse(&gram.chol) - old_kinv.expect("computed above for ADF");
                self.set_posterior(&Posterior::from_natural(nat)?);
            }
        }
        Ok(())
    }

    fn opt_resize(&mut self, hypers: &HyperParams) {
        if self.opt.first.len() != hypers.num_params() {
            self.opt = AdamState::new(hypers.num_params(), self.opt.learning_rate);
        }
    }

    fn keep_geometry(&mut self, geo: Geometry) {
        if self.cache_upsilon && geo.indices.is_none() {
            self.cache = Some(geo);
        }
    }

    fn full_geometry(&mut self, x: &DMatrix<f64>) -> Result<Geometry> {
        match self.cache.take() {
            Some(g) => Ok(g),
            None => Geometry::new(&self.hypers, x, None),
        }
    }

    /// Geometry over the rows of `batch` (all rows when `None`).
    fn batch_geometry(&mut self, x: &DMatrix<f64>, batch: Option<&[usize]>) -> Result<Geometry> {
        match (batch, &self.cache) {
            (None, _) => self.full_geometry(x),
            (Some(b), Some(full)) => Ok(Geometry {
                gram: full.gram.clone(),
                kuu: full.kuu.clone(),
                kinv: full.kinv.clone(),
                kuf: full.kuf.select_columns(b),
                upsilon: full.upsilon.select_columns(b),
                s: DVector::from_iterator(b.len(), b.iter().map(|&i| full.s[i])),
                indices: Some(b.to_vec()),
            }),
            (Some(b), None) => Geometry::new(&self.hypers, x, Some(b)),
        }
    }

    /// `q = prior + Σ sites`, halving any negative-precision sites until the
    /// result is positive definite.
    fn rebuild_ep(&mut self, geo: &Geometry) -> Result<Posterior> {
        let prior = geo.prior();
        let FactorState::Ep(sites) = &mut self.factors else {
            return Err(Error::Config("not an EP state".into()));
        };
        for _ in 0..60 {
            let nat = gaussian::combine(
                &prior,
                Factors::Sites {
                    sites,
                    upsilon: &geo.upsilon,
                },
            )?;
            if let Ok(q) = Posterior::from_natural(nat) {
                self.set_posterior(&q);
                return Ok(q);
            }
            let mut touched = false;
            for s in sites.iter_mut().filter(|s| s.nu < 0.0) {
                s.nu *= 0.5;
                s.mu_t *= 0.5;
                touched = true;
            }
            if !touched {
                break;
            }
            log::warn!("posterior not positive definite, shrinking negative sites");
        }
        Err(Error::PosteriorBroken)
    }
}

/// Outcome of one factor update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateStats {
    pub updated: usize,
    /// Instances whose projection failed and kept their previous factor.
    pub skipped: usize,
}

/// Undamped projection of one instance from its cavity marginal.
fn project(y: f64, m_c: f64, v_c: f64, s: f64) -> Result<SiteParams> {
    let t = tilted_moments(y, m_c, v_c, s)?;
    site_update(m_c, v_c, &t, &SiteParams::uniform(), 1.0)
}

/// Factor update over `batch` (every instance when `None`). Returns the
/// geometry used (all rows for EP, the batch rows otherwise) and the
/// factorized posterior it produced.
fn update_factors(
    state: &mut ModelState,
    data: &Dataset,
    batch: Option<&[usize]>,
    rho: f64,
) -> Result<(Geometry, UpdateStats, Option<Posterior>)> {
    let n = data.len();
    if n != state.n {
        return Err(Error::Dimension {
            context: "training set size",
            expected: state.n,
            found: n,
        });
    }
    let mut stats = UpdateStats::default();
    match state.method {
        Method::Ep => {
            let geo = state.full_geometry(&data.x)?;
            let q = state.current_posterior()?;
            let active: Vec<usize> = match batch {
                Some(b) => b.to_vec(),
                None => (0..n).collect(),
            };
            let ups = geo.upsilon.select_columns(&active);
            let spread = &q.moments.sigma * &ups;
            let m_a = ups.tr_mul(&q.moments.mu);
            let v_a = linalg::column_dots(&ups, &spread);
            let FactorState::Ep(sites) = &mut state.factors else {
                unreachable!()
            };
            let fresh: Vec<Result<SiteParams>> = active
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let (m_c, v_c) = gaussian::ep_cavity(m_a[j], v_a[j], &sites[i])?;
                    let t = tilted_moments(data.y[i], m_c, v_c, geo.s[i])?;
                    site_update(m_c, v_c, &t, &sites[i], rho)
                })
                .collect();
            for (&i, new) in active.iter().zip(fresh) {
                match new {
                    Ok(s) => {
                        sites[i] = s;
                        stats.updated += 1;
                    }
                    Err(e) => {
                        log::debug!("site {i} kept: {e}");
                        stats.skipped += 1;
                    }
                }
            }
            let q = state.rebuild_ep(&geo)?;
            Ok((geo, stats, Some(q)))
        }
        Method::Sep if n == 0 => {
            let geo = state.full_geometry(&data.x)?;
            state.factors = FactorState::Sep(GaussianNatural::zeros(geo.kinv.nrows()));
            state.q_nat = geo.prior();
            Ok((geo, stats, None))
        }
        Method::Sep => {
            let geo = state.batch_geometry(&data.x, batch)?;
            let FactorState::Sep(theta) = &state.factors else {
                unreachable!()
            };
            let cav = Posterior::from_natural(gaussian::sep_cavity_natural(&state.q_nat, theta, n))?;
            let (m_c, v_c) = hypergrad::projected_marginals(&cav, &geo.upsilon);
            let (nu, mu, stats) = project_all(&geo, data, batch, &m_c, &v_c);
            let fresh = GaussianNatural {
                h: &geo.upsilon * &mu,
                lambda: linalg::weighted_gram(&geo.upsilon, &nu),
            };
            let next = sep_accumulate(theta, n, stats.updated, rho, &fresh);
            let mut q = geo.prior();
            q.add_assign(&next);
            let q = Posterior::from_natural(q).map_err(|_| Error::PosteriorBroken)?;
            state.set_posterior(&q);
            state.factors = FactorState::Sep(next);
            Ok((geo, stats, Some(q)))
        }
        Method::Adf => {
            let geo = state.batch_geometry(&data.x, batch)?;
            let q = state.current_posterior()?;
            let (m_a, v_a) = hypergrad::projected_marginals(&q, &geo.upsilon);
            let (nu, mu, stats) = project_all(&geo, data, batch, &m_a, &v_a);
            let mut next = state.q_nat.clone();
            next.lambda += linalg::weighted_gram(&geo.upsilon, &(&nu * rho));
            next.h += &geo.upsilon * (&mu * rho);
            let q = Posterior::from_natural(next).map_err(|_| Error::PosteriorBroken)?;
            state.set_posterior(&q);
            Ok((geo, stats, Some(q)))
        }
    }
}

/// `θ·(n − ρk)/n + ρ·fresh`: each of the `k` updated instances swaps its
/// share `θ/n` for the damped `ρθ_i* + (1 − ρ)θ/n`, skipped ones keep theirs.
pub(crate) fn sep_accumulate(
    theta: &GaussianNatural,
    n: usize,
    updated: usize,
    rho: f64,
    fresh: &GaussianNatural,
) -> GaussianNatural {
    let mut next = theta.scaled((n as f64 - rho * updated as f64) / n as f64);
    next.add_scaled(fresh, rho);
    next
}

/// Undamped site naturals for every column of `geo`; failed projections
/// come back as zeros.
fn project_all(
    geo: &Geometry,
    data: &Dataset,
    batch: Option<&[usize]>,
    m_c: &DVector<f64>,
    v_c: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, UpdateStats) {
    let cols = geo.len();
    let mut nu = DVector::zeros(cols);
    let mut mu = DVector::zeros(cols);
    let mut stats = UpdateStats::default();
    for j in 0..cols {
        let i = batch.map_or(j, |b| b[j]);
        match project(data.y[i], m_c[j], v_c[j], geo.s[j]) {
            Ok(s) => {
                nu[j] = s.nu;
                mu[j] = s.mu_t;
                stats.updated += 1;
            }
            Err(e) => {
                log::debug!("instance {i} skipped: {e}");
                stats.skipped += 1;
            }
        }
    }
    (nu, mu, stats)
}

/// Factor update followed, when hyperparameters are learned, by one
/// gradient step on the energy.
fn step(state: &mut ModelState, data: &Dataset, batch: Option<&[usize]>, config: &TrainConfig) -> Result<UpdateStats> {
    if let Some(b) = batch {
        if let Some(&bad) = b.iter().find(|&&i| i >= data.len()) {
            return Err(Error::InvalidIndex {
                index: bad,
                count: data.len(),
            });
        }
    }
    state.cache_upsilon = config.cache_upsilon;
    let (geo, stats, q) = update_factors(state, data, batch, config.damping())?;
    state.step += 1;
    if config.learn_hypers && !data.is_empty() {
        let fixed = match &state.factors {
            FactorState::Ep(s) => FixedFactors::Sites(s.clone()),
            FactorState::Sep(t) => FixedFactors::Global(t.clone()),
            FactorState::Adf => FixedFactors::Global(state.q_nat.sub(&geo.prior())),
        };
        let grad = hypergrad::gradient_on(state.method, &state.hypers, &geo, data, batch, &fixed, q.as_ref())?;
        let (opt, next) = hypergrad::opt_step(&state.opt, &grad, &state.hypers)?;
        state.opt = opt;
        if next != state.hypers {
            state.set_hypers(next, data)?;
        } else {
            state.keep_geometry(geo);
        }
    } else {
        state.keep_geometry(geo);
    }
    Ok(stats)
}

/// One pass over every instance.
pub fn batch_pass(state: &mut ModelState, data: &Dataset, config: &TrainConfig) -> Result<UpdateStats> {
    step(state, data, None, config)
}

/// One update over the instances in `batch`.
pub fn minibatch_step(
    state: &mut ModelState,
    batch: &[usize],
    data: &Dataset,
    config: &TrainConfig,
) -> Result<UpdateStats> {
    step(state, data, Some(batch), config)
}

/// Length-scales `√d`, unit amplitude and a seeded subsample of the
/// training inputs as inducing points.
pub fn init_hypers(x: &DMatrix<f64>, m: usize, jitter: Option<f64>, rng: &mut ChaCha8Rng) -> Result<HyperParams> {
    let n = x.nrows();
    if m == 0 || m > n {
        return Err(Error::Config(format!("cannot pick {m} inducing points from {n} rows")));
    }
    let idx = rand::seq::index::sample(rng, n, m).into_vec();
    let z = x.select_rows(&idx);
    let d = x.ncols().max(1) as f64;
    let mut h = HyperParams::isotropic(d.sqrt(), 1.0, z)?;
    if let Some(j) = jitter {
        h.jitter = j;
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    /// Training time so far, excluding evaluation.
    pub wall_time_s: f64,
    pub test_nll: Option<f64>,
    pub test_err: Option<f64>,
    pub memory_params: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceLog {
    pub records: Vec<TraceRecord>,
}

impl TraceLog {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "wall_time_s", "test_nll", "test_err"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                format!("{:?}", r.wall_time_s),
                opt(r.test_nll),
                opt(r.test_err),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    fn record(&mut self, state: &ModelState, elapsed: f64, test: Option<&Dataset>) -> Result<()> {
        let (nll, err) = match test {
            Some(t) if !t.is_empty() => {
                let (a, b) = state.evaluate(t)?;
                (Some(a), Some(b))
            }
            _ => (None, None),
        };
        self.records.push(TraceRecord {
            step: state.step,
            wall_time_s: elapsed,
            test_nll: nll,
            test_err: err,
            memory_params: state.memory_footprint().total(),
        });
        Ok(())
    }
}

/// Optional per-record callback, e.g. for writing checkpoints.
pub type Observer<'a> = dyn FnMut(&ModelState, &TraceRecord) -> Result<()> + 'a;

pub fn fit(data: &Dataset, config: &TrainConfig, test: Option<&Dataset>) -> Result<(ModelState, TraceLog)> {
    fit_observed(data, config, test, &mut |_, _| Ok(()))
}

/// [`fit`] with a callback after every trace record.
pub fn fit_observed(
    data: &Dataset,
    config: &TrainConfig,
    test: Option<&Dataset>,
    observer: &mut Observer<'_>,
) -> Result<(ModelState, TraceLog)> {
    config.validate(data.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let hypers = init_hypers(&data.x, config.num_inducing, config.jitter, &mut rng)?;
    let mut state = ModelState::new(config.method, hypers, data.len(), config.learning_rate)?;
    state.cache_upsilon = config.cache_upsilon;
    train(&mut state, data, config, test, &mut rng, observer).map(|trace| (state, trace))
}

/// Continues training an existing state for `config.iterations` more
/// passes or epochs.
pub fn train(
    state: &mut ModelState,
    data: &Dataset,
    config: &TrainConfig,
    test: Option<&Dataset>,
    rng: &mut ChaCha8Rng,
    observer: &mut Observer<'_>,
) -> Result<TraceLog> {
    let mut trace = TraceLog::default();
    let mut elapsed = 0.0;
    let mut emit = |state: &ModelState, elapsed: f64, trace: &mut TraceLog| -> Result<()> {
        trace.record(state, elapsed, test)?;
        observer(state, trace.records.last().expect("just recorded"))
    };
    emit(state, elapsed, &mut trace)?;

    match config.minibatch {
        None => {
            for _ in 0..config.iterations {
                let t0 = Instant::now();
                batch_pass(state, data, config)?;
                elapsed += t0.elapsed().as_secs_f64();
                emit(state, elapsed, &mut trace)?;
            }
        }
        Some(size) => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut since = 0;
            for _ in 0..config.iterations {
                order.shuffle(rng);
                for chunk in order.chunks(size) {
                    let t0 = Instant::now();
                    minibatch_step(state, chunk, data, config)?;
                    elapsed += t0.elapsed().as_secs_f64();
                    since += 1;
                    if since == config.trace_every {
                        since = 0;
                        emit(state, elapsed, &mut trace)?;
                    }
                }
            }
            if since > 0 {
                emit(state, elapsed, &mut trace)?;
            }
        }
    }
    Ok(trace)
}
