//! Count competitor: a gridded log-Gaussian Cox model fit by stochastic
//! gradient Langevin dynamics within Gibbs.
//!
//! Data model per pixel `s_i` and period `t`:
//!
//! ```text
//! CNT_t(s_i) | Lambda_t(s_i) ~ Poisson(exp[Lambda_t(s_i)])
//! Lambda_t(s_i) = d_{ti}' beta + a_i' zeta*_t + e_ti,   e_ti ~ N(0, 1 - r)
//! zeta*_t ~ N(0, r Q(phi)^{-1}) independently over t
//! beta    ~ N(0, v_beta I),  phi ~ Uniform(0, 2 Delta),  r ~ Uniform(0, 1)
//! ```
//!
//! with `Q(phi)` the unit-variance Matern (nu = 1) mesh precision, `a_i`
//! the barycentric projection row of pixel i, and `d_{ti}` the fixed design
//! row (static columns, optionally extended by per-period covariates). The
//! field weights absorb sqrt(r), so marginally `Lambda_t` has covariance
//! `(1 - r) I + r A Q^{-1} A'` around its regression mean. Missing counts
//! simply drop out of the Poisson term; their log-intensities keep moving
//! under the Gaussian layer and feed the predictive CDF.
//!
//! One sweep updates, in order: every `Lambda_t` by one Langevin step whose
//! gradient uses the exact Gaussian prior term plus the Poisson data term
//! of a random batch of `b` periods scaled by `T / b` (an unbiased
//! stochastic gradient of the full log-posterior; injected noise variance
//! equals the step size), then `zeta*_t` (closed-form Gibbs, one sparse
//! factorization of `A'A/(1-r) + Q/r` shared across periods), `beta`
//! (conjugate Gibbs), and `phi`, `r` (logit-scale random-walk Metropolis,
//! adapted toward 0.44 acceptance during burn-in). The step size decays as
//! `a (1 + iter/c)^{-0.55}`; with the default `a = 1e-4` the initial noise
//! RMS per coordinate is 0.01. Log-intensities are clamped to a finite
//! band so `exp` cannot overflow; every clamp is counted as a diagnostic.
//!
//! Per-period updates draw from counter-based substreams keyed by
//! `(domain, period, iteration)`, so chains are identical in serial and
//! parallel execution and can resume exactly from a state snapshot plus
//! the iteration counter.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmrf::{assemble_precision, GmrfSolver};
use crate::mathx::{logit, poisson_cdf, sample_mvn_from_precision, sample_std_normal, sigmoid};
use crate::mesh::{
    assemble_fem, domain_diameter, project, FemMatrices, Point2, ProjectionMatrix, TriMesh,
};
use crate::occurrence::{
    adapt_scale, phi_log_ratio, r_log_ratio, CovariatePanel, DesignMatrix,
};
use crate::rngx::{RngLattice, DOMAIN_COEF, DOMAIN_FIELD, DOMAIN_HYPER, DOMAIN_PERIOD};
use crate::sparse::SymSparse;

/// Coefficient prior variance by design width: weakly informative for a
/// handful of columns, shrinking for covariate-heavy designs.
const BETA_VARIANCE_SMALL: f64 = 100.0;
const BETA_VARIANCE_LARGE: f64 = 0.1;
const BETA_AUTO_THRESHOLD: usize = 10;

/// Count observations on the pixel grid, period-major, `None` where masked.
#[derive(Debug, Clone, PartialEq)]
pub struct CountPanel {
    n: usize,
    t: usize,
    values: Vec<Option<u32>>,
}

impl CountPanel {
    pub fn new(n: usize, t: usize, values: Vec<Option<u32>>) -> Result<CountPanel> {
        if values.len() != n * t || n == 0 || t == 0 {
            return Err(Error::Dimension(format!(
                "{} count cells cannot fill {n} pixels x {t} periods",
                values.len()
            )));
        }
        Ok(CountPanel { n, t, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn get(&self, pixel: usize, period: usize) -> Option<u32> {
        self.values[period * self.n + pixel]
    }

    pub fn n_observed(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

/// Chain controls. Priors are fixed by the model; run length, the Langevin
/// schedule, proposal scales, and optional pins are configurable.
#[derive(Debug, Clone)]
pub struct LgcpConfig {
    pub iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    /// Periods whose Poisson term enters each stochastic gradient.
    pub batch: usize,
    /// Langevin step size schedule a (1 + iter/c)^(-0.55); `step_c: None`
    /// uses iterations / 10. Step 0 freezes the log-intensities.
    pub step_a: f64,
    pub step_c: Option<f64>,
    /// Log-intensities are clamped to [-bound, bound].
    pub lambda_bound: f64,
    /// Random-walk SDs on the logit-transformed scales.
    pub s_phi: f64,
    pub s_r: f64,
    /// Robbins-Monro adaptation toward 0.44 acceptance during burn-in.
    pub adapt: bool,
    /// `None` picks 100 up to 10 coefficients and 0.1 beyond.
    pub beta_prior_variance: Option<f64>,
    pub fix_phi: Option<f64>,
    pub fix_r: Option<f64>,
    /// Pin the regression coefficients instead of sampling them.
    pub fix_beta: Option<Vec<f64>>,
}

impl Default for LgcpConfig {
    fn default() -> LgcpConfig {
        LgcpConfig {
            iterations: 250_000,
            burn_in: 200_000,
            thin: 25,
            batch: 10,
            step_a: 1e-4,
            step_c: None,
            lambda_bound: 30.0,
            s_phi: 0.3,
            s_r: 0.3,
            adapt: true,
            beta_prior_variance: None,
            fix_phi: None,
            fix_r: None,
            fix_beta: None,
        }
    }
}

impl LgcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn-in {} must be below the iteration count {}",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thinning stride must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.step_a >= 0.0) || !self.step_c.map_or(true, |c| c > 0.0) {
            return Err(Error::Config("step schedule needs a >= 0 and c > 0".into()));
        }
        if !(self.lambda_bound > 0.0) {
            return Err(Error::Config("log-intensity bound must be positive".into()));
        }
        if !(self.s_phi > 0.0) || !(self.s_r > 0.0) {
            return Err(Error::Config("proposal SDs must be positive".into()));
        }
        if let Some(phi) = self.fix_phi {
            if !(phi > 0.0) {
                return Err(Error::Config(format!("fixed range {phi} must be positive")));
            }
        }
        if let Some(r) = self.fix_r {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("fixed ratio {r} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Complete sampler state; with the iteration counter this is all a
/// checkpoint needs to resume exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct LgcpState {
    /// Log-intensities, period-major (`lambda[t * n + i]`).
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
    /// Field weights, period-major (`zeta[t * n_star + j]`).
    pub zeta: Vec<f64>,
    pub phi: f64,
    pub r: f64,
    pub s_phi: f64,
    pub s_r: f64,
}

/// One retained draw of the non-latent parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LgcpDraw {
    pub phi: f64,
    pub r: f64,
    pub beta: Vec<f64>,
}

/// Thinned post-burn-in output plus retained log-intensities at the
/// prediction cells.
#[derive(Debug, Clone, PartialEq)]
pub struct LgcpChain {
    pub n: usize,
    pub t: usize,
    pub draws: Vec<LgcpDraw>,
    /// Prediction cells as (pixel, period); defaults to the masked counts.
    pub targets: Vec<(usize, usize)>,
    /// Per retained draw, the log-intensity at each target, draw-major.
    pub target_lambda: Vec<f64>,
    /// Langevin updates that hit the log-intensity bound.
    pub clamp_events: u64,
    pub accept_phi: u64,
    pub attempt_phi: u64,
    pub accept_r: u64,
    pub attempt_r: u64,
}

impl LgcpChain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn target_index(&self, cell: (usize, usize)) -> Option<usize> {
        self.targets.iter().position(|&c| c == cell)
    }

    /// Log-intensity of one retained draw at one target.
    pub fn target_lambda(&self, draw: usize, target: usize) -> f64 {
        self.target_lambda[draw * self.targets.len() + target]
    }

    pub fn accept_rate_phi(&self) -> f64 {
        self.accept_phi as f64 / self.attempt_phi.max(1) as f64
    }

    pub fn accept_rate_r(&self) -> f64 {
        self.accept_r as f64 / self.attempt_r.max(1) as f64
    }
}

/// A chain in progress: snapshot this (it is plain data) to checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LgcpRun {
    pub state: LgcpState,
    pub next_iter: u64,
    pub chain: LgcpChain,
}

/// Posterior-predictive count CDF at one prediction cell: the average over
/// retained draws of the Poisson CDF at rate exp(lambda).
pub fn lgcp_predictive_cdf(chain: &LgcpChain, cell: (usize, usize), u: f64) -> Result<f64> {
    if !u.is_finite() || u < 0.0 {
        return Err(Error::Parameter(format!(
            "count threshold {u} must be finite and nonnegative"
        )));
    }
    let k = chain
        .target_index(cell)
        .ok_or_else(|| Error::Parameter(format!("cell {cell:?} is not a prediction target")))?;
    if chain.draws.is_empty() {
        return Err(Error::Parameter("chain has no retained draws".into()));
    }
    let level = u.floor() as u64;
    let mut acc = 0.0;
    for d in 0..chain.draws.len() {
        acc += poisson_cdf(level, chain.target_lambda(d, k).exp());
    }
    Ok(acc / chain.draws.len() as f64)
}

/// Poisson-plus-prior log density of one period's log-intensities, up to a
/// constant in `lambda`: sum over observed cells of `y lambda - exp(lambda)`
/// plus the Gaussian term `-(lambda - mean)^2 / (2 (1 - r))` over all cells.
pub fn lambda_log_posterior(
    y: &[Option<u32>],
    lambda: &[f64],
    mean: &[f64],
    r: f64,
) -> f64 {
    let mut acc = 0.0;
    for i in 0..lambda.len() {
        if let Some(yi) = y[i] {
            acc += yi as f64 * lambda[i] - lambda[i].exp();
        }
        let d = lambda[i] - mean[i];
        acc -= d * d / (2.0 * (1.0 - r));
    }
    acc
}

/// Gradient of `lambda_log_posterior` with the data term scaled: per cell
/// `scale (y - exp(lambda))` where observed, minus `(lambda - mean)/(1-r)`.
fn lambda_gradient_scaled(
    y: &[Option<u32>],
    lambda: &[f64],
    mean: &[f64],
    r: f64,
    scale: f64,
) -> Vec<f64> {
    (0..lambda.len())
        .map(|i| {
            let mut g = -(lambda[i] - mean[i]) / (1.0 - r);
            if let Some(yi) = y[i] {
                g += scale * (yi as f64 - lambda[i].exp());
            }
            g
        })
        .collect()
}

/// Exact gradient of `lambda_log_posterior`.
pub fn lambda_gradient(y: &[Option<u32>], lambda: &[f64], mean: &[f64], r: f64) -> Vec<f64> {
    lambda_gradient_scaled(y, lambda, mean, r, 1.0)
}

struct SweepBuf {
    /// Fixed-design mean `d_{ti}' beta` per cell, period-major.
    meanfield: Vec<f64>,
    /// Projected field `a_i' zeta*_t` per cell, period-major.
    azeta: Vec<f64>,
    q: SymSparse,
    q_logdet: f64,
    q_quads: f64,
    m: SymSparse,
}

/// Count-model sampler bound to one data set and mesh. Construction performs
/// all validation and precomputation; `start` initializes a run and
/// `advance` moves it forward any number of iterations.
pub struct LgcpSampler<'a> {
    cnt: &'a CountPanel,
    design: &'a DesignMatrix,
    cov: Option<&'a CovariatePanel>,
    targets: Vec<(usize, usize)>,
    config: LgcpConfig,
    lattice: RngLattice,
    fem: FemMatrices,
    a: ProjectionMatrix,
    ata: SymSparse,
    solver: GmrfSolver,
    two_delta: f64,
    n: usize,
    t: usize,
    nstar: usize,
    /// Combined coefficient count: static design plus per-period covariates.
    p: usize,
    beta_var: f64,
    /// Sum over cells of the combined design row outer products.
    gram: DMatrix<f64>,
}

impl<'a> LgcpSampler<'a> {
    pub fn new(
        cnt: &'a CountPanel,
        locations: &'a [Point2],
        design: &'a DesignMatrix,
        covariates: Option<&'a CovariatePanel>,
        mesh: &TriMesh,
        targets: Option<Vec<(usize, usize)>>,
        config: LgcpConfig,
        lattice: RngLattice,
    ) -> Result<LgcpSampler<'a>> {
        config.validate()?;
        let (n, t) = (cnt.n(), cnt.t());
        if locations.len() != n || design.n() != n {
            return Err(Error::Dimension(format!(
                "{} locations and {}-row design for {n} pixels",
                locations.len(),
                design.n()
            )));
        }
        let cov = covariates.filter(|c| c.l() > 0);
        if let Some(c) = cov {
            if c.n() != n || c.t() != t {
                return Err(Error::Dimension(format!(
                    "covariate panel {}x{} does not match counts {n}x{t}",
                    c.n(),
                    c.t()
                )));
            }
        }
        if config.batch > t {
            return Err(Error::Config(format!(
                "batch size {} exceeds the {t} periods",
                config.batch
            )));
        }
        let two_delta = match config.fix_phi {
            Some(phi) => (2.0 * domain_diameter(locations)).max(2.0 * phi),
            None => 2.0 * domain_diameter(locations),
        };
        if !(two_delta > 0.0) {
            return Err(Error::Parameter(
                "range prior needs a positive domain diameter; pin the range for a single pixel"
                    .into(),
            ));
        }
        let a = project(mesh, locations)?;
        let fem = assemble_fem(mesh)?;
        let ata = a.normal_matrix(fem.pattern());
        let solver = GmrfSolver::new(fem.pattern());
        let nstar = fem.n();
        let p = design.p() + cov.map_or(0, |c| c.l());
        let beta_var = config.beta_prior_variance.unwrap_or(if p <= BETA_AUTO_THRESHOLD {
            BETA_VARIANCE_SMALL
        } else {
            BETA_VARIANCE_LARGE
        });
        if !(beta_var > 0.0) {
            return Err(Error::Config("coefficient prior variance must be positive".into()));
        }
        if let Some(b) = &config.fix_beta {
            if b.len() != p {
                return Err(Error::Dimension(format!(
                    "{} pinned coefficients for {p} design columns",
                    b.len()
                )));
            }
        }
        let targets = match targets {
            Some(list) => {
                for &(i, tt) in &list {
                    if i >= n || tt >= t {
                        return Err(Error::Dimension(format!(
                            "target cell ({i}, {tt}) outside {n} pixels x {t} periods"
                        )));
                    }
                }
                list
            }
            None => {
                let mut list = Vec::new();
                for tt in 0..t {
                    for i in 0..n {
                        if cnt.get(i, tt).is_none() {
                            list.push((i, tt));
                        }
                    }
                }
                list
            }
        };
        let mut sampler = LgcpSampler {
            cnt,
            design,
            cov,
            targets,
            config,
            lattice,
            fem,
            a,
            ata,
            solver,
            two_delta,
            n,
            t,
            nstar,
            p,
            beta_var,
            gram: DMatrix::zeros(p, p),
        };
        let mut gram = DMatrix::zeros(p, p);
        let mut row = vec![0.0; p];
        for tt in 0..t {
            for i in 0..n {
                sampler.design_row(i, tt, &mut row);
                for (j, &rj) in row.iter().enumerate() {
                    for (k, &rk) in row.iter().enumerate() {
                        gram[(j, k)] += rj * rk;
                    }
                }
            }
        }
        sampler.gram = gram;
        Ok(sampler)
    }

    pub fn config(&self) -> &LgcpConfig {
        &self.config
    }

    /// Combined design row: static columns then per-period covariates.
    fn design_row(&self, pixel: usize, period: usize, out: &mut [f64]) {
        let px = self.design.p();
        out[..px].copy_from_slice(self.design.row(pixel));
        if let Some(c) = self.cov {
            out[px..].copy_from_slice(c.cell(pixel, period));
        }
    }

    fn meanfield(&self, beta: &[f64]) -> Vec<f64> {
        let (n, t) = (self.n, self.t);
        let mut out = vec![0.0; n * t];
        let mut row = vec![0.0; self.p];
        for tt in 0..t {
            for i in 0..n {
                self.design_row(i, tt, &mut row);
                out[tt * n + i] = row.iter().zip(beta).map(|(d, b)| d * b).sum();
            }
        }
        out
    }

    /// Initial run: coefficients from a ridge fit of log(count + 0.5) on
    /// the observed cells, log-intensities at the data where observed and
    /// at the regression mean where masked, weights at zero.
    pub fn start(&self) -> Result<LgcpRun> {
        let (n, t, p) = (self.n, self.t, self.p);
        let beta = match &self.config.fix_beta {
            Some(b) => b.clone(),
            None => {
                let mut gram_obs = DMatrix::zeros(p, p);
                let mut lin = DVector::zeros(p);
                let mut row = vec![0.0; p];
                for tt in 0..t {
                    for i in 0..n {
                        if let Some(y) = self.cnt.get(i, tt) {
                            self.design_row(i, tt, &mut row);
                            let target = (y as f64 + 0.5).ln();
                            for j in 0..p {
                                lin[j] += row[j] * target;
                                for k in 0..p {
                                    gram_obs[(j, k)] += row[j] * row[k];
                                }
                            }
                        }
                    }
                }
                for j in 0..p {
                    gram_obs[(j, j)] += 1e-6;
                }
                gram_obs
                    .cholesky()
                    .ok_or_else(|| {
                        Error::NotPositiveDefinite("count design normal equations".into())
                    })?
                    .solve(&lin)
                    .iter()
                    .copied()
                    .collect()
            }
        };
        let meanfield = self.meanfield(&beta);
        let bound = self.config.lambda_bound;
        let mut lambda = vec![0.0; n * t];
        for tt in 0..t {
            for i in 0..n {
                let cell = tt * n + i;
                lambda[cell] = match self.cnt.get(i, tt) {
                    Some(y) => (y as f64 + 0.5).ln(),
                    None => meanfield[cell],
                }
                .clamp(-bound, bound);
            }
        }
        let r = self.config.fix_r.unwrap_or(0.5);
        let phi = match self.config.fix_phi {
            Some(v) => v,
            None => 0.05 * self.two_delta,
        };
        let state = LgcpState {
            lambda,
            beta,
            zeta: vec![0.0; self.nstar * t],
            phi,
            r,
            s_phi: self.config.s_phi,
            s_r: self.config.s_r,
        };
        Ok(LgcpRun {
            state,
            next_iter: 0,
            chain: LgcpChain {
                n,
                t,
                draws: Vec::new(),
                targets: self.targets.clone(),
                target_lambda: Vec::new(),
                clamp_events: 0,
                accept_phi: 0,
                attempt_phi: 0,
                accept_r: 0,
                attempt_r: 0,
            },
        })
    }

    fn rebuild(&self, state: &LgcpState) -> Result<SweepBuf> {
        let (n, t) = (self.n, self.t);
        let mut azeta = vec![0.0; n * t];
        for tt in 0..t {
            let zeta_t = &state.zeta[tt * self.nstar..(tt + 1) * self.nstar];
            for i in 0..n {
                azeta[tt * n + i] = self.a.row_dot(i, zeta_t);
            }
        }
        let q = assemble_precision(&self.fem, state.phi)?;
        let q_logdet = self.solver.factor(&q)?.logdet();
        let q_quads = self.quad_sum(&q, &state.zeta);
        let m = SymSparse::zeros(self.fem.pattern().clone());
        Ok(SweepBuf {
            meanfield: self.meanfield(&state.beta),
            azeta,
            q,
            q_logdet,
            q_quads,
            m,
        })
    }

    /// Per-period quad forms are computed in parallel but summed in period
    /// order, so the result is bit-identical at any thread count.
    fn quad_sum(&self, q: &SymSparse, zeta: &[f64]) -> f64 {
        let parts: Vec<f64> = zeta.par_chunks(self.nstar).map(|z| q.quad_form(z)).collect();
        parts.iter().sum()
    }

    fn step_size(&self, iter: u64) -> f64 {
        let c = self
            .config
            .step_c
            .unwrap_or_else(|| (self.config.iterations as f64 / 10.0).max(1.0));
        self.config.step_a * (1.0 + iter as f64 / c).powf(-0.55)
    }

    /// Advance until the run's iteration counter reaches
    /// `min(until, config.iterations)`.
    pub fn advance(&self, run: &mut LgcpRun, until: u64) -> Result<()> {
        let until = until.min(self.config.iterations);
        if run.next_iter >= until {
            return Ok(());
        }
        let mut buf = self.rebuild(&run.state)?;
        while run.next_iter < until {
            self.step(run, &mut buf)?;
        }
        Ok(())
    }

    fn step(&self, run: &mut LgcpRun, buf: &mut SweepBuf) -> Result<()> {
        let iter = run.next_iter;
        let (n, t, nstar) = (self.n, self.t, self.nstar);
        let state = &mut run.state;
        let mut rh = self.lattice.stream(DOMAIN_HYPER, 0, iter);

        // Log-intensities: one Langevin step on every period; the Poisson
        // term enters only for the batch periods, scaled to stay unbiased.
        let step = self.step_size(iter);
        if step > 0.0 {
            let mut in_batch = vec![false; t];
            let mut order: Vec<usize> = (0..t).collect();
            for k in 0..self.config.batch {
                let j = rand::Rng::gen_range(&mut rh, k..t);
                order.swap(k, j);
                in_batch[order[k]] = true;
            }
            let scale = t as f64 / self.config.batch as f64;
            let bound = self.config.lambda_bound;
            let half = 0.5 * step;
            let noise = step.sqrt();
            let r = state.r;
            let meanfield = &buf.meanfield;
            let azeta = &buf.azeta;
            let cnt = self.cnt;
            let lattice = self.lattice;
            let clamped: u64 = state
                .lambda
                .par_chunks_mut(n)
                .enumerate()
                .map(|(tt, lam_t)| {
                    let mut rt = lattice.stream(DOMAIN_PERIOD, tt as u64, iter);
                    let y: Vec<Option<u32>> = (0..n).map(|i| cnt.get(i, tt)).collect();
                    let mean: Vec<f64> = (0..n)
                        .map(|i| meanfield[tt * n + i] + azeta[tt * n + i])
                        .collect();
                    let data_scale = if in_batch[tt] { scale } else { 0.0 };
                    let grad = lambda_gradient_scaled(&y, lam_t, &mean, r, data_scale);
                    let mut clamps = 0u64;
                    for i in 0..n {
                        let v = lam_t[i] + half * grad[i] + noise * sample_std_normal(&mut rt);
                        lam_t[i] = v.clamp(-bound, bound);
                        if lam_t[i] != v {
                            clamps += 1;
                        }
                    }
                    clamps
                })
                .sum();
            run.chain.clamp_events += clamped;
        }

        // Field weights: one factorization of A'A/(1-r) + Q/r serves every
        // period; periods then draw independently in parallel.
        {
            let c1 = 1.0 / (1.0 - state.r);
            let c2 = 1.0 / state.r;
            for ((mv, &av), &qv) in buf
                .m
                .values_mut()
                .iter_mut()
                .zip(self.ata.values())
                .zip(buf.q.values())
            {
                *mv = c1 * av + c2 * qv;
            }
            let fm = self.solver.factor(&buf.m).map_err(|e| {
                Error::Numerical(format!(
                    "weight precision not factorizable at iteration {iter}: {e}"
                ))
            })?;
            let lambda = &state.lambda;
            let meanfield = &buf.meanfield;
            let a = &self.a;
            let lattice = self.lattice;
            state
                .zeta
                .par_chunks_mut(nstar)
                .zip(buf.azeta.par_chunks_mut(n))
                .enumerate()
                .for_each(|(tt, (zeta_t, azeta_t))| {
                    let mut rt = lattice.stream(DOMAIN_FIELD, tt as u64, iter);
                    let mut v = vec![0.0; n];
                    for i in 0..n {
                        let cell = tt * n + i;
                        v[i] = c1 * (lambda[cell] - meanfield[cell]);
                    }
                    let rhs = a.mul_transpose(&v);
                    let draw = fm.sample_from_precision(&rhs, &mut rt);
                    zeta_t.copy_from_slice(&draw);
                    for i in 0..n {
                        azeta_t[i] = a.row_dot(i, zeta_t);
                    }
                });
            buf.q_quads = self.quad_sum(&buf.q, &state.zeta);
        }

        // Regression coefficients, conjugate given the latents.
        if self.config.fix_beta.is_none() {
            let mut rg = self.lattice.stream(DOMAIN_COEF, 0, iter);
            let c1 = 1.0 / (1.0 - state.r);
            let mut lin = DVector::zeros(self.p);
            let mut row = vec![0.0; self.p];
            for tt in 0..t {
                for i in 0..n {
                    let cell = tt * n + i;
                    self.design_row(i, tt, &mut row);
                    let resid = state.lambda[cell] - buf.azeta[cell];
                    for j in 0..self.p {
                        lin[j] += row[j] * resid;
                    }
                }
            }
            lin *= c1;
            let mut prec = &self.gram * c1;
            for j in 0..self.p {
                prec[(j, j)] += 1.0 / self.beta_var;
            }
            state.beta = sample_mvn_from_precision(&prec, &lin, &mut rg)?
                .iter()
                .copied()
                .collect();
            buf.meanfield = self.meanfield(&state.beta);
        }

        // Range update: logit random walk on (0, 2 Delta).
        if self.config.fix_phi.is_none() {
            let z = sample_std_normal(&mut rh);
            let u: f64 = rand::Rng::gen(&mut rh);
            let phi_p =
                self.two_delta * sigmoid(logit(state.phi / self.two_delta) + state.s_phi * z);
            let q_p = assemble_precision(&self.fem, phi_p)?;
            let logdet_p = self.solver.factor(&q_p)?.logdet();
            let quads_p = self.quad_sum(&q_p, &state.zeta);
            let lr = phi_log_ratio(
                t,
                state.r,
                self.two_delta,
                (state.phi, buf.q_logdet, buf.q_quads),
                (phi_p, logdet_p, quads_p),
            );
            if lr.is_nan() {
                return Err(Error::Numerical(format!(
                    "non-finite range acceptance ratio at iteration {iter}"
                )));
            }
            run.chain.attempt_phi += 1;
            if u.ln() < lr {
                run.chain.accept_phi += 1;
                state.phi = phi_p;
                buf.q = q_p;
                buf.q_logdet = logdet_p;
                buf.q_quads = quads_p;
            }
            if self.config.adapt && iter < self.config.burn_in {
                state.s_phi = adapt_scale(state.s_phi, iter, lr.exp().min(1.0));
            }
        }

        // Variance-ratio update: logit random walk on (0, 1).
        if self.config.fix_r.is_none() {
            let z = sample_std_normal(&mut rh);
            let u: f64 = rand::Rng::gen(&mut rh);
            let r_p = sigmoid(logit(state.r) + state.s_r * z);
            let lambda = &state.lambda;
            let meanfield = &buf.meanfield;
            let azeta = &buf.azeta;
            let parts: Vec<f64> = (0..t)
                .into_par_iter()
                .map(|tt| {
                    let mut s = 0.0;
                    for cell in tt * n..(tt + 1) * n {
                        let d = lambda[cell] - meanfield[cell] - azeta[cell];
                        s += d * d;
                    }
                    s
                })
                .collect();
            let sse: f64 = parts.iter().sum();
            let lr = r_log_ratio(n * t, nstar * t, sse, buf.q_quads, state.r, r_p);
            if lr.is_nan() {
                return Err(Error::Numerical(format!(
                    "non-finite ratio acceptance ratio at iteration {iter}"
                )));
            }
            run.chain.attempt_r += 1;
            if u.ln() < lr {
                run.chain.accept_r += 1;
                state.r = r_p;
            }
            if self.config.adapt && iter < self.config.burn_in {
                state.s_r = adapt_scale(state.s_r, iter, lr.exp().min(1.0));
            }
        }

        if !(state.phi.is_finite() && state.r.is_finite())
            || state.beta.iter().any(|b| !b.is_finite())
        {
            return Err(Error::Numerical(format!(
                "non-finite parameters at iteration {iter}"
            )));
        }

        if iter >= self.config.burn_in && (iter - self.config.burn_in) % self.config.thin == 0 {
            run.chain.draws.push(LgcpDraw {
                phi: state.phi,
                r: state.r,
                beta: state.beta.clone(),
            });
            for &(i, tt) in &run.chain.targets {
                run.chain.target_lambda.push(state.lambda[tt * n + i]);
            }
        }
        run.next_iter = iter + 1;
        Ok(())
    }
}

/// Fit the count chain end to end; prediction targets default to the
/// masked cells.
pub fn run_lgcp(
    cnt: &CountPanel,
    locations: &[Point2],
    design: &DesignMatrix,
    mesh: &TriMesh,
    config: &LgcpConfig,
    lattice: RngLattice,
) -> Result<LgcpChain> {
    let sampler =
        LgcpSampler::new(cnt, locations, design, None, mesh, None, config.clone(), lattice)?;
    let mut run = sampler.start()?;
    sampler.advance(&mut run, config.iterations)?;
    Ok(run.chain)
}

/// Covariate variant: cell mean extends the static design with per-period
/// columns. With no covariates this is exactly `run_lgcp`.
pub fn run_lgcp_cov(
    cnt: &CountPanel,
    locations: &[Point2],
    design: &DesignMatrix,
    covariates: &CovariatePanel,
    mesh: &TriMesh,
    config: &LgcpConfig,
    lattice: RngLattice,
) -> Result<LgcpChain> {
    if covariates.l() == 0 {
        return run_lgcp(cnt, locations, design, mesh, config, lattice);
    }
    let sampler = LgcpSampler::new(
        cnt,
        locations,
        design,
        Some(covariates),
        mesh,
        None,
        config.clone(),
        lattice,
    )?;
    let mut run = sampler.start()?;
    sampler.advance(&mut run, config.iterations)?;
    Ok(run.chain)
}
