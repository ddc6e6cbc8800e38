//! Occurrence-stage sampler: a latent-probit spatial model for the
//! burn/no-burn indicator, fit by Gibbs-within-Metropolis.
//!
//! Data model per pixel `s_i` and period `t`:
//!
//! ```text
//! Z_t(s_i) = 1{X_t(s_i) > 0}
//! X_t(s_i) = mu_Z(s_i) + c_t(s_i) + a_i' eps*_t + e_ti,   e_ti ~ N(0, 1 - r)
//! eps*_t   ~ N(0, r Q(phi)^{-1}) independently over t
//! mu_Z     ~ N(D theta, tau^{-1} I_N),  theta ~ N(0, 10^2 I),  tau ~ Gamma(0.1, 0.1)
//! phi      ~ Uniform(0, 2 Delta),  r ~ Uniform(0, 1)
//! ```
//!
//! where `Q(phi)` is the unit-variance Matern (nu = 1) mesh precision,
//! `a_i` the barycentric projection row of pixel i, and `c_t(s_i)` an
//! optional covariate term `sum_l gamma_l d_{l,t}(s_i)` with
//! `gamma ~ N(0, 10^2 I_L)`. The field weights absorb the sqrt(r) scale, so
//! their prior precision is `Q / r` and the nugget variance is `1 - r`;
//! marginally each `X_t(s_i)` has unit variance and `Pr(Z = 1) = Phi(mu_Z)`.
//!
//! One sweep updates, in order: `mu_Z` (conjugate normal with scalar
//! precision `T/(1-r) + tau`), `theta` and `tau` (conjugate), `gamma`
//! (conjugate, covariate runs only), all `eps*_t` (one sparse factorization
//! of `A'A/(1-r) + Q/r` shared across periods), `phi` and `r` (logit-scale
//! random-walk Metropolis whose acceptance ratios carry the Jacobian factors
//! `phi (2 Delta - phi)` and `r (1 - r)`), and finally every latent `X_t(s_i)`
//! from a normal truncated to (0, inf) where Z = 1, to (-inf, 0) where Z = 0,
//! and unconstrained where Z is missing.
//!
//! Per-period updates draw from counter-based substreams keyed by
//! `(domain, period, iteration)`, so chains are identical in serial and
//! parallel execution and can resume exactly from a state snapshot plus the
//! iteration counter.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmrf::{assemble_precision, GmrfSolver};
use crate::mathx::{
    logit, norm_cdf, norm_quantile, sample_gamma, sample_mvn_from_precision, sample_std_normal,
    sample_truncnorm_lower, sample_truncnorm_upper, sigmoid,
};
use crate::mesh::{
    assemble_fem, domain_diameter, project, FemMatrices, Point2, ProjectionMatrix, TriMesh,
};
use crate::panel::IndicatorPanel;
use crate::rngx::{
    RngLattice, DOMAIN_COEF, DOMAIN_FIELD, DOMAIN_HYPER, DOMAIN_INIT, DOMAIN_PERIOD,
};
use crate::sparse::SymSparse;

/// Variance of the Gaussian priors on trend and covariate coefficients.
const COEF_PRIOR_VARIANCE: f64 = 100.0;
/// Gamma(shape, rate) prior on the trend precision tau.
const TAU_PRIOR_SHAPE: f64 = 0.1;
const TAU_PRIOR_RATE: f64 = 0.1;
/// Robbins-Monro target acceptance rate for the logit-scale random walks.
const TARGET_ACCEPT: f64 = 0.44;

/// Gram-matrix full-rank test: in-place Cholesky with a relative pivot
/// floor, since exact factorization can slip past roundoff-level pivots.
fn gram_full_rank(g: &DMatrix<f64>) -> bool {
    let p = g.nrows();
    let floor = 1e-10 * (0..p).map(|k| g[(k, k)]).fold(0.0f64, f64::max);
    let mut m = g.clone();
    for k in 0..p {
        for j in 0..k {
            m[(k, k)] -= m[(k, j)] * m[(k, j)];
        }
        if m[(k, k)] <= floor {
            return false;
        }
        m[(k, k)] = m[(k, k)].sqrt();
        for i in k + 1..p {
            for j in 0..k {
                m[(i, k)] -= m[(i, j)] * m[(k, j)];
            }
            m[(i, k)] /= m[(k, k)];
        }
    }
    true
}

/// Pixel-level regression design for the trend `D theta`. The standard
/// build has six columns (intercept, longitude, latitude, mean altitude,
/// altitude SD, mainland proportion); reduced designs down to a bare
/// intercept are accepted as long as the columns are linearly independent.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    n: usize,
    p: usize,
    values: Vec<f64>,
}

impl DesignMatrix {
    /// Row-major `n x p` matrix; rejects rank-deficient columns.
    pub fn new(n: usize, p: usize, values: Vec<f64>) -> Result<DesignMatrix> {
        if p == 0 || n < p || values.len() != n * p {
            return Err(Error::Dimension(format!(
                "design of {} values cannot be {n} rows x {p} columns",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("design matrix has non-finite entries".into()));
        }
        let d = DesignMatrix { n, p, values };
        if !gram_full_rank(&d.gram()) {
            return Err(Error::Parameter(
                "design matrix is rank deficient".into(),
            ));
        }
        Ok(d)
    }

    /// The six canonical columns: intercept, longitude, latitude, mean
    /// altitude, altitude SD, mainland proportion.
    pub fn standard(
        locations: &[Point2],
        alt_mean: &[f64],
        alt_sd: &[f64],
        mainland: &[f64],
    ) -> Result<DesignMatrix> {
        let n = locations.len();
        if alt_mean.len() != n || alt_sd.len() != n || mainland.len() != n {
            return Err(Error::Dimension(
                "covariate columns do not match the location count".into(),
            ));
        }
        let mut values = Vec::with_capacity(n * 6);
        for i in 0..n {
            values.extend_from_slice(&[
                1.0,
                locations[i].lon,
                locations[i].lat,
                alt_mean[i],
                alt_sd[i],
                mainland[i],
            ]);
        }
        DesignMatrix::new(n, 6, values)
    }

    pub fn intercept(n: usize) -> DesignMatrix {
        DesignMatrix { n, p: 1, values: vec![1.0; n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.p..(i + 1) * self.p]
    }

    /// D theta.
    pub fn mul(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(theta).map(|(d, t)| d * t).sum())
            .collect()
    }

    /// D' v.
    pub fn tmul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.p];
        for i in 0..self.n {
            for (k, d) in self.row(i).iter().enumerate() {
                out[k] += d * v[i];
            }
        }
        out
    }

    /// D'D.
    pub fn gram(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.p, self.p);
        for i in 0..self.n {
            let row = self.row(i);
            for a in 0..self.p {
                for b in 0..self.p {
                    g[(a, b)] += row[a] * row[b];
                }
            }
        }
        g
    }
}

/// Cell-level covariates for the extended occurrence run: `l` values per
/// (pixel, period) cell, stored cell-major so `value(i, t, k)` reads
/// `values[(t * n + i) * l + k]`.
#[derive(Debug, Clone)]
pub struct CovariatePanel {
    n: usize,
    t: usize,
    l: usize,
    values: Vec<f64>,
}

impl CovariatePanel {
    pub fn new(n: usize, t: usize, l: usize, values: Vec<f64>) -> Result<CovariatePanel> {
        if values.len() != n * t * l {
            return Err(Error::Dimension(format!(
                "covariate panel of {} values cannot be {n} x {t} x {l}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("covariate panel has non-finite entries".into()));
        }
        Ok(CovariatePanel { n, t, l, values })
    }

    pub fn empty(n: usize, t: usize) -> CovariatePanel {
        CovariatePanel { n, t, l: 0, values: Vec::new() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn cell(&self, pixel: usize, period: usize) -> &[f64] {
        let base = (period * self.n + pixel) * self.l;
        &self.values[base..base + self.l]
    }

    /// Gram matrix over all cells, for the conjugate coefficient update.
    fn gram(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.l, self.l);
        for c in 0..self.n * self.t {
            let row = &self.values[c * self.l..(c + 1) * self.l];
            for a in 0..self.l {
                for b in 0..self.l {
                    g[(a, b)] += row[a] * row[b];
                }
            }
        }
        g
    }
}

/// Chain controls. Priors are fixed by the model; only run length, proposal
/// scales, and the optional hyperparameter pins are configurable.
#[derive(Debug, Clone)]
pub struct Stage1Config {
    pub iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    /// Random-walk SDs on the logit-transformed scales.
    pub s_phi: f64,
    pub s_r: f64,
    /// Robbins-Monro adaptation of the proposal SDs toward 0.44 acceptance
    /// during burn-in; scales are frozen once burn-in ends.
    pub adapt: bool,
    /// Pin the range or the variance ratio instead of sampling it.
    pub fix_phi: Option<f64>,
    pub fix_r: Option<f64>,
    /// Covariate runs only: keep gamma at zero (the chain then reproduces
    /// the covariate-free run draw for draw).
    pub gamma_fixed_zero: bool,
}

impl Default for Stage1Config {
    fn default() -> Stage1Config {
        Stage1Config {
            iterations: 60_000,
            burn_in: 10_000,
            thin: 5,
            s_phi: 0.3,
            s_r: 0.3,
            adapt: true,
            fix_phi: None,
            fix_r: None,
            gamma_fixed_zero: false,
        }
    }
}

impl Stage1Config {
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

/// Complete sampler state; together with the iteration counter this is all
/// that a checkpoint needs to resume exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1State {
    /// Latent reals, period-major (`x[t * n + i]`).
    pub x: Vec<f64>,
    pub mu_z: Vec<f64>,
    pub theta: Vec<f64>,
    pub tau: f64,
    /// Field weights, period-major (`eps[t * n_star + j]`).
    pub eps: Vec<f64>,
    pub phi: f64,
    pub r: f64,
    /// Covariate coefficients; empty when the run has none.
    pub gamma: Vec<f64>,
    /// Current proposal SDs (they move during burn-in adaptation).
    pub s_phi: f64,
    pub s_r: f64,
}

/// One retained draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Draw {
    pub mu_z: Vec<f64>,
    pub theta: Vec<f64>,
    pub tau: f64,
    pub phi: f64,
    pub r: f64,
    pub gamma: Vec<f64>,
}

/// Thinned post-burn-in output plus running predictive accumulators for the
/// cells whose indicator is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Chain {
    pub n: usize,
    pub t: usize,
    pub draws: Vec<Stage1Draw>,
    /// Cells with missing indicator, period-major order, as (pixel, period).
    pub missing_cells: Vec<(usize, usize)>,
    /// Running sum over retained draws of Phi((mu + c + a'eps) / sqrt(1-r))
    /// per missing cell, aligned with `missing_cells`.
    pub cond_prob_sum: Vec<f64>,
    pub cond_draws: usize,
    pub accept_phi: u64,
    pub attempt_phi: u64,
    pub accept_r: u64,
    pub attempt_r: u64,
}

impl Stage1Chain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Posterior-mean conditional occurrence probability per missing cell.
    pub fn cond_occurrence(&self) -> Vec<f64> {
        let d = (self.cond_draws.max(1)) as f64;
        self.cond_prob_sum.iter().map(|s| s / d).collect()
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
pub struct Stage1Run {
    pub state: Stage1State,
    pub next_iter: u64,
    pub chain: Stage1Chain,
}

/// Posterior occurrence probabilities: per-draw fields `Phi(mu_Z)` and
/// their posterior mean.
#[derive(Debug, Clone)]
pub struct OccurrenceField {
    pub mean: Vec<f64>,
    pub draws: Vec<Vec<f64>>,
}

/// Marginal occurrence probability per pixel from the retained trend draws.
pub fn predict_occurrence_prob(chain: &Stage1Chain) -> Result<OccurrenceField> {
    if chain.draws.is_empty() {
        return Err(Error::Parameter("occurrence chain has no retained draws".into()));
    }
    let n = chain.n;
    let mut mean = vec![0.0; n];
    let mut draws = Vec::with_capacity(chain.draws.len());
    for d in &chain.draws {
        let p: Vec<f64> = d.mu_z.iter().map(|&m| norm_cdf(m)).collect();
        for i in 0..n {
            mean[i] += p[i];
        }
        draws.push(p);
    }
    let k = chain.draws.len() as f64;
    for m in &mut mean {
        *m /= k;
    }
    Ok(OccurrenceField { mean, draws })
}

/// Gamma(shape, rate) parameters of the tau full conditional given the
/// trend residual sum of squares.
pub(crate) fn tau_posterior(n: usize, ssr: f64) -> (f64, f64) {
    (TAU_PRIOR_SHAPE + 0.5 * n as f64, TAU_PRIOR_RATE + 0.5 * ssr)
}

/// Log acceptance ratio for the range update. `cur` and `prop` carry
/// (phi, logdet Q(phi), sum_t eps_t' Q(phi) eps_t); the Jacobian of the
/// logit map on (0, 2 Delta) contributes phi (2 Delta - phi).
pub(crate) fn phi_log_ratio(
    t: usize,
    r: f64,
    two_delta: f64,
    cur: (f64, f64, f64),
    prop: (f64, f64, f64),
) -> f64 {
    let (phi_c, logdet_c, quad_c) = cur;
    let (phi_p, logdet_p, quad_p) = prop;
    0.5 * t as f64 * (logdet_p - logdet_c) - (quad_p - quad_c) / (2.0 * r)
        + (phi_p * (two_delta - phi_p)).ln()
        - (phi_c * (two_delta - phi_c)).ln()
}

/// Log acceptance ratio for the variance-ratio update. `sse` is the sum of
/// squared nugget residuals over all `n_cells` latent cells; `quad_sum` is
/// sum_t eps_t' Q eps_t over all `field_cells = n_star * T` weights.
pub(crate) fn r_log_ratio(
    n_cells: usize,
    field_cells: usize,
    sse: f64,
    quad_sum: f64,
    r_cur: f64,
    r_prop: f64,
) -> f64 {
    let part = |r: f64| {
        -0.5 * n_cells as f64 * (1.0 - r).ln() - sse / (2.0 * (1.0 - r))
            - 0.5 * field_cells as f64 * r.ln()
            - quad_sum / (2.0 * r)
            + (r * (1.0 - r)).ln()
    };
    part(r_prop) - part(r_cur)
}

/// Robbins-Monro step on a log proposal scale.
pub(crate) fn adapt_scale(s: f64, iter: u64, accept_prob: f64) -> f64 {
    let gain = ((iter + 1) as f64).powf(-0.6);
    (s * (gain * (accept_prob - TARGET_ACCEPT)).exp()).clamp(1e-3, 1e3)
}

/// Occurrence-stage sampler bound to one data set and mesh. Construction
/// performs all validation and precomputation; `start` initializes a run and
/// `advance` moves it forward any number of iterations.
pub struct Stage1Sampler<'a> {
    ind: &'a IndicatorPanel,
    design: &'a DesignMatrix,
    cov: Option<&'a CovariatePanel>,
    config: Stage1Config,
    lattice: RngLattice,
    fem: FemMatrices,
    a: ProjectionMatrix,
    ata: SymSparse,
    solver: GmrfSolver,
    dtd: DMatrix<f64>,
    cov_gram: Option<DMatrix<f64>>,
    two_delta: f64,
    n: usize,
    t: usize,
    nstar: usize,
}

/// Quantities derived from the state that persist across sweeps within one
/// `advance` call; rebuilt from the state alone, so resuming is exact.
struct SweepBuf {
    /// a_i' eps*_t per cell, period-major.
    aeps: Vec<f64>,
    /// Covariate contribution per cell, period-major (zeros when unused).
    covt: Vec<f64>,
    q: SymSparse,
    q_logdet: f64,
    /// sum_t eps_t' Q eps_t at the current (phi, eps).
    q_quads: f64,
    /// Scratch for the weight precision A'A/(1-r) + Q/r.
    m: SymSparse,
}

impl<'a> Stage1Sampler<'a> {
    pub fn new(
        indicator: &'a IndicatorPanel,
        locations: &[Point2],
        design: &'a DesignMatrix,
        covariates: Option<&'a CovariatePanel>,
        mesh: &TriMesh,
        config: Stage1Config,
        lattice: RngLattice,
    ) -> Result<Stage1Sampler<'a>> {
        config.validate()?;
        let n = indicator.n();
        let t = indicator.t();
        if locations.len() != n || design.n() != n {
            return Err(Error::Dimension(format!(
                "indicator ({n} pixels), locations ({}), and design ({}) disagree",
                locations.len(),
                design.n()
            )));
        }
        if indicator.missing_count() == n * t {
            return Err(Error::Parameter("indicator panel is entirely missing".into()));
        }
        let mut cov_gram = None;
        if let Some(c) = covariates {
            if c.n() != n || c.t() != t {
                return Err(Error::Dimension(format!(
                    "covariate panel is {} x {}, panel is {n} x {t}",
                    c.n(),
                    c.t()
                )));
            }
            if c.l() > 0 {
                let g = c.gram();
                if !gram_full_rank(&g) {
                    return Err(Error::Parameter("covariates are rank deficient".into()));
                }
                cov_gram = Some(g);
            }
        }
        let two_delta = 2.0 * domain_diameter(locations);
        if !(two_delta > 0.0) && config.fix_phi.is_none() {
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
        let dtd = design.gram();
        Ok(Stage1Sampler {
            ind: indicator,
            design,
            cov: covariates.filter(|c| c.l() > 0),
            config,
            lattice,
            fem,
            a,
            ata,
            solver,
            dtd,
            cov_gram,
            two_delta,
            n,
            t,
            nstar,
        })
    }

    pub fn config(&self) -> &Stage1Config {
        &self.config
    }

    /// Initial run: trend at the probit of per-pixel occurrence frequencies
    /// (clipped to +-3), weights at zero, latents drawn once from their
    /// truncated conditionals.
    pub fn start(&self) -> Result<Stage1Run> {
        let mut rng = self.lattice.stream(DOMAIN_INIT, 0, 0);
        let (n, t) = (self.n, self.t);
        let mut mu_z = vec![0.0; n];
        for i in 0..n {
            let mut ones = 0usize;
            let mut seen = 0usize;
            for tt in 0..t {
                if let Some(z) = self.ind.get(i, tt) {
                    seen += 1;
                    ones += z as usize;
                }
            }
            let freq = if seen == 0 {
                0.5
            } else {
                (ones as f64 + 0.5) / (seen as f64 + 1.0)
            };
            mu_z[i] = norm_quantile(freq).clamp(-3.0, 3.0);
        }
        let r = self.config.fix_r.unwrap_or(0.5);
        let phi = match self.config.fix_phi {
            Some(p) => p,
            None => 0.05 * self.two_delta,
        };
        let sd = (1.0 - r).sqrt();
        let mut x = vec![0.0; n * t];
        for tt in 0..t {
            for i in 0..n {
                x[tt * n + i] = match self.ind.get(i, tt) {
                    Some(true) => sample_truncnorm_lower(mu_z[i], sd, 0.0, &mut rng),
                    Some(false) => sample_truncnorm_upper(mu_z[i], sd, 0.0, &mut rng),
                    None => mu_z[i] + sd * sample_std_normal(&mut rng),
                };
            }
        }
        let gamma = vec![0.0; self.cov.map_or(0, |c| c.l())];
        let state = Stage1State {
            x,
            mu_z,
            theta: vec![0.0; self.design.p()],
            tau: 1.0,
            eps: vec![0.0; self.nstar * t],
            phi,
            r,
            gamma,
            s_phi: self.config.s_phi,
            s_r: self.config.s_r,
        };
        let mut missing_cells = Vec::new();
        for tt in 0..t {
            for i in 0..n {
                if self.ind.get(i, tt).is_none() {
                    missing_cells.push((i, tt));
                }
            }
        }
        let cond_prob_sum = vec![0.0; missing_cells.len()];
        Ok(Stage1Run {
            state,
            next_iter: 0,
            chain: Stage1Chain {
                n,
                t,
                draws: Vec::new(),
                missing_cells,
                cond_prob_sum,
                cond_draws: 0,
                accept_phi: 0,
                attempt_phi: 0,
                accept_r: 0,
                attempt_r: 0,
            },
        })
    }

    fn rebuild(&self, state: &Stage1State) -> Result<SweepBuf> {
        let (n, t) = (self.n, self.t);
        let mut aeps = vec![0.0; n * t];
        for tt in 0..t {
            let eps_t = &state.eps[tt * self.nstar..(tt + 1) * self.nstar];
            for i in 0..n {
                aeps[tt * n + i] = self.a.row_dot(i, eps_t);
            }
        }
        let mut covt = vec![0.0; n * t];
        if let Some(c) = self.cov {
            for cell in 0..n * t {
                let i = cell % n;
                let tt = cell / n;
                covt[cell] = c
                    .cell(i, tt)
                    .iter()
                    .zip(&state.gamma)
                    .map(|(d, g)| d * g)
                    .sum();
            }
        }
        let q = assemble_precision(&self.fem, state.phi)?;
        let q_logdet = self.solver.factor(&q)?.logdet();
        let q_quads = self.quad_sum(&q, &state.eps);
        let m = SymSparse::zeros(self.fem.pattern().clone());
        Ok(SweepBuf { aeps, covt, q, q_logdet, q_quads, m })
    }

    /// Per-period quad forms are computed in parallel but summed in period
    /// order, so the result is bit-identical at any thread count.
    fn quad_sum(&self, q: &SymSparse, eps: &[f64]) -> f64 {
        let parts: Vec<f64> = eps.par_chunks(self.nstar).map(|e| q.quad_form(e)).collect();
        parts.iter().sum()
    }

    /// Advance until the run's iteration counter reaches
    /// `min(until, config.iterations)`.
    pub fn advance(&self, run: &mut Stage1Run, until: u64) -> Result<()> {
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

    fn step(&self, run: &mut Stage1Run, buf: &mut SweepBuf) -> Result<()> {
        let iter = run.next_iter;
        let (n, t, nstar) = (self.n, self.t, self.nstar);
        let state = &mut run.state;
        let mut rh = self.lattice.stream(DOMAIN_HYPER, 0, iter);

        // Trend field: scalar precision T/(1-r) + tau, so pixels decouple.
        let dtheta = self.design.mul(&state.theta);
        let prec = t as f64 / (1.0 - state.r) + state.tau;
        let sd = prec.sqrt().recip();
        for i in 0..n {
            let mut s = 0.0;
            for tt in 0..t {
                let c = tt * n + i;
                s += state.x[c] - buf.aeps[c] - buf.covt[c];
            }
            let mean = (s / (1.0 - state.r) + state.tau * dtheta[i]) / prec;
            state.mu_z[i] = mean + sd * sample_std_normal(&mut rh);
        }

        // Trend coefficients and precision, both conjugate.
        let mut lam = &self.dtd * state.tau;
        for k in 0..self.design.p() {
            lam[(k, k)] += 1.0 / COEF_PRIOR_VARIANCE;
        }
        let linear = DVector::from_vec(self.design.tmul(&state.mu_z)) * state.tau;
        state.theta = sample_mvn_from_precision(&lam, &linear, &mut rh)?
            .iter()
            .copied()
            .collect();
        let dtheta = self.design.mul(&state.theta);
        let ssr: f64 = state
            .mu_z
            .iter()
            .zip(&dtheta)
            .map(|(m, d)| (m - d) * (m - d))
            .sum();
        let (shape, rate) = tau_posterior(n, ssr);
        state.tau = sample_gamma(shape, rate, &mut rh);

        // Covariate coefficients, conjugate given the latents.
        if let (Some(c), Some(gram)) = (self.cov, self.cov_gram.as_ref()) {
            if !self.config.gamma_fixed_zero {
                let mut rg = self.lattice.stream(DOMAIN_COEF, 0, iter);
                let scale = 1.0 / (1.0 - state.r);
                let mut lin = DVector::zeros(c.l());
                for cell in 0..n * t {
                    let i = cell % n;
                    let tt = cell / n;
                    let resid = state.x[cell] - state.mu_z[i] - buf.aeps[cell];
                    for (k, d) in c.cell(i, tt).iter().enumerate() {
                        lin[k] += d * resid;
                    }
                }
                lin *= scale;
                let mut prec_g = gram * scale;
                for k in 0..c.l() {
                    prec_g[(k, k)] += 1.0 / COEF_PRIOR_VARIANCE;
                }
                state.gamma = sample_mvn_from_precision(&prec_g, &lin, &mut rg)?
                    .iter()
                    .copied()
                    .collect();
                for cell in 0..n * t {
                    let i = cell % n;
                    let tt = cell / n;
                    buf.covt[cell] = c
                        .cell(i, tt)
                        .iter()
                        .zip(&state.gamma)
                        .map(|(d, g)| d * g)
                        .sum();
                }
            }
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
                Error::Numerical(format!("weight precision not factorizable at iteration {iter}: {e}"))
            })?;
            let x = &state.x;
            let mu = &state.mu_z;
            let covt = &buf.covt;
            let a = &self.a;
            let lattice = self.lattice;
            state
                .eps
                .par_chunks_mut(nstar)
                .zip(buf.aeps.par_chunks_mut(n))
                .enumerate()
                .for_each(|(tt, (eps_t, aeps_t))| {
                    let mut rt = lattice.stream(DOMAIN_FIELD, tt as u64, iter);
                    let mut v = vec![0.0; n];
                    for i in 0..n {
                        let cell = tt * n + i;
                        v[i] = c1 * (x[cell] - mu[i] - covt[cell]);
                    }
                    let rhs = a.mul_transpose(&v);
                    let draw = fm.sample_from_precision(&rhs, &mut rt);
                    eps_t.copy_from_slice(&draw);
                    for i in 0..n {
                        aeps_t[i] = a.row_dot(i, eps_t);
                    }
                });
            buf.q_quads = self.quad_sum(&buf.q, &state.eps);
        }

        // Range update: logit random walk on (0, 2 Delta).
        if self.config.fix_phi.is_none() {
            let z = sample_std_normal(&mut rh);
            let u: f64 = rand::Rng::gen(&mut rh);
            let phi_p = self.two_delta * sigmoid(logit(state.phi / self.two_delta) + state.s_phi * z);
            let q_p = assemble_precision(&self.fem, phi_p)?;
            let logdet_p = self.solver.factor(&q_p)?.logdet();
            let quads_p = self.quad_sum(&q_p, &state.eps);
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
            let x = &state.x;
            let mu = &state.mu_z;
            let aeps = &buf.aeps;
            let covt = &buf.covt;
            let parts: Vec<f64> = (0..t)
                .into_par_iter()
                .map(|tt| {
                    let mut s = 0.0;
                    for i in 0..n {
                        let cell = tt * n + i;
                        let d = x[cell] - mu[i] - covt[cell] - aeps[cell];
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

        // Latents: truncated where the indicator is observed, free where
        // it is missing.
        {
            let sd = (1.0 - state.r).sqrt();
            let mu = &state.mu_z;
            let aeps = &buf.aeps;
            let covt = &buf.covt;
            let ind = self.ind;
            let lattice = self.lattice;
            state.x.par_chunks_mut(n).enumerate().for_each(|(tt, x_t)| {
                let mut rt = lattice.stream(DOMAIN_PERIOD, tt as u64, iter);
                for i in 0..n {
                    let cell = tt * n + i;
                    let mean = mu[i] + covt[cell] + aeps[cell];
                    x_t[i] = match ind.get(i, tt) {
                        Some(true) => sample_truncnorm_lower(mean, sd, 0.0, &mut rt),
                        Some(false) => sample_truncnorm_upper(mean, sd, 0.0, &mut rt),
                        None => mean + sd * sample_std_normal(&mut rt),
                    };
                }
            });
        }

        if !(state.tau.is_finite() && state.phi.is_finite() && state.r.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite hyperparameters at iteration {iter}"
            )));
        }

        if iter >= self.config.burn_in && (iter - self.config.burn_in) % self.config.thin == 0 {
            run.chain.draws.push(Stage1Draw {
                mu_z: state.mu_z.clone(),
                theta: state.theta.clone(),
                tau: state.tau,
                phi: state.phi,
                r: state.r,
                gamma: state.gamma.clone(),
            });
            let sd = (1.0 - state.r).sqrt();
            for (k, &(i, tt)) in run.chain.missing_cells.iter().enumerate() {
                let cell = tt * n + i;
                let zscore = (state.mu_z[i] + buf.covt[cell] + buf.aeps[cell]) / sd;
                run.chain.cond_prob_sum[k] += norm_cdf(zscore);
            }
            run.chain.cond_draws += 1;
        }
        run.next_iter = iter + 1;
        Ok(())
    }
}

/// Fit the occurrence chain end to end.
pub fn run_stage1(
    indicator: &IndicatorPanel,
    locations: &[Point2],
    design: &DesignMatrix,
    mesh: &TriMesh,
    config: &Stage1Config,
    lattice: RngLattice,
) -> Result<Stage1Chain> {
    let sampler =
        Stage1Sampler::new(indicator, locations, design, None, mesh, config.clone(), lattice)?;
    let mut run = sampler.start()?;
    sampler.advance(&mut run, config.iterations)?;
    Ok(run.chain)
}

/// Covariate variant: cell mean alpha(s_i) + sum_l gamma_l d_{l,t}(s_i).
/// With no covariates this is exactly `run_stage1`.
pub fn run_stage1_cov(
    indicator: &IndicatorPanel,
    locations: &[Point2],
    design: &DesignMatrix,
    covariates: &CovariatePanel,
    mesh: &TriMesh,
    config: &Stage1Config,
    lattice: RngLattice,
) -> Result<Stage1Chain> {
    if covariates.l() == 0 {
        return run_stage1(indicator, locations, design, mesh, config, lattice);
    }
    let sampler = Stage1Sampler::new(
        indicator,
        locations,
        design,
        Some(covariates),
        mesh,
        config.clone(),
        lattice,
    )?;
    let mut run = sampler.start()?;
    sampler.advance(&mut run, config.iterations)?;
    Ok(run.chain)
}
