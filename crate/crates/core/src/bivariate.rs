//! Bivariate-severity sampler: a separable two-component GMRF for the
//! standardized log size and log count fields, fit by Gibbs-within-
//! Metropolis, plus the zero-inflated lognormal predictive distribution.
//!
//! Data model per period t on the standardized panel `W_t` (component 1 is
//! log burnt area, component 2 is log count, both observed only at cells
//! whose variable is positive):
//!
//! ```text
//! W_t   = [I_2 (x) A] eta*_t + w~_t
//! eta*_t ~ N(0, r S_rho (x) Q(phi)^{-1})      independently over t
//! w~_t   ~ N(0, (1 - r) S_rho (x) I_N),       S_rho = [[1, rho], [rho, 1]]
//! phi ~ U(0, 2 Delta),  r ~ U(0, 1),  rho ~ U(0, 1) (option: U(-1, 1))
//! ```
//!
//! `(x)` is the Kronecker product: one shared Matern (nu = 1) spatial
//! structure, one 2x2 cross-correlation, so each component has unit
//! marginal variance and cross-correlation rho at a common site.
//!
//! One sweep updates every `eta*_t` (posterior precision
//! `S_rho^{-1} (x) M` with `M = A'A/(1-r) + Q/r`, so the posterior mean is
//! component-wise `M^{-1} A' W_tc / (1-r)` and does not involve rho, while
//! the noise is correlated across components), then `phi`, `r`, `rho` by
//! logit-scale random-walk Metropolis, and finally imputes unobserved `W`
//! cells from the bivariate nugget conditional
//! `N_2((a_i'eta*_t1, a_i'eta*_t2)', (1-r) S_rho)`, conditioning on the
//! observed component where exactly one is present. Unobserved cells cover
//! both missing-data cells and zero cells: the positive-part field is pure
//! data augmentation wherever no positive value was observed.
//!
//! Concurrency and checkpointing follow the occurrence sampler: per-period
//! counter-based substreams, state plus iteration counter resume exactly.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmrf::assemble_precision;
use crate::gmrf::GmrfSolver;
use crate::mathx::{
    lognormal_cdf, logit, sample_std_normal, sigmoid,
};
use crate::mesh::{assemble_fem, domain_diameter, project, FemMatrices, Point2, ProjectionMatrix, TriMesh};
use crate::panel::Variable;
use crate::rngx::{RngLattice, DOMAIN_FIELD, DOMAIN_HYPER, DOMAIN_INIT, DOMAIN_PERIOD};
use crate::sparse::SymSparse;
use crate::surfaces::StandardizedPanel;

/// Robbins-Monro target acceptance rate, shared with the occurrence stage.
const TARGET_ACCEPT: f64 = 0.44;

/// Prior support for the cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhoSupport {
    /// Uniform(0, 1): burnt area and counts are a priori positively related.
    Unit,
    /// Uniform(-1, 1).
    Symmetric,
}

impl RhoSupport {
    fn from_logit(self, y: f64) -> f64 {
        match self {
            RhoSupport::Unit => sigmoid(y),
            RhoSupport::Symmetric => 2.0 * sigmoid(y) - 1.0,
        }
    }

    fn to_logit(self, rho: f64) -> f64 {
        match self {
            RhoSupport::Unit => logit(rho),
            RhoSupport::Symmetric => logit(0.5 * (rho + 1.0)),
        }
    }

    fn contains(self, rho: f64) -> bool {
        match self {
            RhoSupport::Unit => rho > 0.0 && rho < 1.0,
            RhoSupport::Symmetric => rho > -1.0 && rho < 1.0,
        }
    }

    /// log of the logit-map Jacobian factor (the uniform prior is constant).
    fn log_jacobian(self, rho: f64) -> f64 {
        match self {
            RhoSupport::Unit => (rho * (1.0 - rho)).ln(),
            RhoSupport::Symmetric => ((1.0 + rho) * (1.0 - rho)).ln(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage3Config {
    pub iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub s_phi: f64,
    pub s_r: f64,
    pub s_rho: f64,
    pub adapt: bool,
    pub fix_phi: Option<f64>,
    pub fix_r: Option<f64>,
    pub fix_rho: Option<f64>,
    pub rho_support: RhoSupport,
}

impl Default for Stage3Config {
    fn default() -> Stage3Config {
        Stage3Config {
            iterations: 60_000,
            burn_in: 10_000,
            thin: 5,
            s_phi: 0.3,
            s_r: 0.3,
            s_rho: 0.3,
            adapt: true,
            fix_phi: None,
            fix_r: None,
            fix_rho: None,
            rho_support: RhoSupport::Unit,
        }
    }
}

impl Stage3Config {
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
        if !(self.s_phi > 0.0 && self.s_r > 0.0 && self.s_rho > 0.0) {
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
        if let Some(rho) = self.fix_rho {
            if !(rho > -1.0 && rho < 1.0) {
                return Err(Error::Config(format!(
                    "fixed cross-correlation {rho} must lie in (-1, 1)"
                )));
            }
        }
        Ok(())
    }
}

/// Complete sampler state. `w` is the completed panel (data plus current
/// imputations), component-major within period:
/// `w[t * 2n + c * n + i]` for component c in {0, 1}; `eta` likewise with
/// `n_star` in place of `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage3State {
    pub w: Vec<f64>,
    pub eta: Vec<f64>,
    pub phi: f64,
    pub r: f64,
    pub rho: f64,
    pub s_phi: f64,
    pub s_r: f64,
    pub s_rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage3Draw {
    pub phi: f64,
    pub r: f64,
    pub rho: f64,
}

/// Thinned output plus, per retained draw, the projected field pair
/// `(a_i'eta*_t1, a_i'eta*_t2)` at every target cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage3Chain {
    pub n: usize,
    pub t: usize,
    pub draws: Vec<Stage3Draw>,
    /// Cells retained for prediction, as (pixel, period).
    pub targets: Vec<(usize, usize)>,
    /// Row-major: draw d, target k at `d * targets.len() + k`.
    pub target_means: Vec<[f64; 2]>,
    pub accept_phi: u64,
    pub attempt_phi: u64,
    pub accept_r: u64,
    pub attempt_r: u64,
    pub accept_rho: u64,
    pub attempt_rho: u64,
}

impl Stage3Chain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn target_index(&self, cell: (usize, usize)) -> Option<usize> {
        self.targets.iter().position(|&c| c == cell)
    }

    pub fn target_mean(&self, draw: usize, target: usize) -> [f64; 2] {
        self.target_means[draw * self.targets.len() + target]
    }

    pub fn accept_rate_phi(&self) -> f64 {
        self.accept_phi as f64 / self.attempt_phi.max(1) as f64
    }

    pub fn accept_rate_r(&self) -> f64 {
        self.accept_r as f64 / self.attempt_r.max(1) as f64
    }

    pub fn accept_rate_rho(&self) -> f64 {
        self.accept_rho as f64 / self.attempt_rho.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage3Run {
    pub state: Stage3State,
    pub next_iter: u64,
    pub chain: Stage3Chain,
}

/// Zero-inflated positive-part mixture CDF at threshold u >= 0:
/// `(1 - p) + p F_LN(u; mu, sigma2)`, the point mass at zero carrying
/// probability 1 - p.
pub fn predictive_cdf(p: f64, mu: f64, sigma2: f64, u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("occurrence probability {p} outside [0, 1]")));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::Parameter(format!("log-variance {sigma2} must be positive")));
    }
    if !(u >= 0.0) {
        return Err(Error::Parameter(format!("threshold {u} must be nonnegative")));
    }
    Ok((1.0 - p) + p * lognormal_cdf(u, mu, sigma2.sqrt()))
}

/// One sweep's Metropolis bookkeeping: the cross-component quadratic forms
/// that phi, r, and rho all consume.
pub(crate) struct CrossSums {
    /// sum_t (eta1'Q eta1 + eta2'Q eta2), sum_t eta1'Q eta2.
    q_same: f64,
    q_cross: f64,
    /// sum over cells of (e1^2 + e2^2) and of e1 e2 for the nugget
    /// residuals e = w - a'eta.
    w_same: f64,
    w_cross: f64,
}

/// rho-weighted combination (x_same - 2 rho x_cross) / (1 - rho^2) that the
/// Gaussian quadratic forms reduce to under S_rho^{-1}.
fn rho_combine(same: f64, cross: f64, rho: f64) -> f64 {
    (same - 2.0 * rho * cross) / (1.0 - rho * rho)
}

/// Sums per-period (same, cross) partials in period order so the totals are
/// bit-identical at any thread count.
fn pair_sum(parts: Vec<(f64, f64)>) -> (f64, f64) {
    parts.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1))
}

/// Log acceptance ratio for the range update; `cur`/`prop` carry
/// (phi, logdet Q, q_same, q_cross).
pub(crate) fn phi3_log_ratio(
    t: usize,
    r: f64,
    rho: f64,
    two_delta: f64,
    cur: (f64, f64, f64, f64),
    prop: (f64, f64, f64, f64),
) -> f64 {
    let (phi_c, ld_c, qs_c, qc_c) = cur;
    let (phi_p, ld_p, qs_p, qc_p) = prop;
    t as f64 * (ld_p - ld_c)
        - (rho_combine(qs_p, qc_p, rho) - rho_combine(qs_c, qc_c, rho)) / (2.0 * r)
        + (phi_p * (two_delta - phi_p)).ln()
        - (phi_c * (two_delta - phi_c)).ln()
}

/// Log acceptance ratio for the variance-ratio update. `n_cells = N T` and
/// `field_cells = N* T` count per-component sites.
pub(crate) fn r3_log_ratio(
    n_cells: usize,
    field_cells: usize,
    sums: &CrossSums,
    rho: f64,
    r_cur: f64,
    r_prop: f64,
) -> f64 {
    let s_w = rho_combine(sums.w_same, sums.w_cross, rho);
    let s_q = rho_combine(sums.q_same, sums.q_cross, rho);
    let part = |r: f64| {
        -(n_cells as f64) * (1.0 - r).ln() - s_w / (2.0 * (1.0 - r))
            - (field_cells as f64) * r.ln()
            - s_q / (2.0 * r)
            + (r * (1.0 - r)).ln()
    };
    part(r_prop) - part(r_cur)
}

/// Log acceptance ratio for the cross-correlation update.
pub(crate) fn rho3_log_ratio(
    n_cells: usize,
    field_cells: usize,
    sums: &CrossSums,
    r: f64,
    support: RhoSupport,
    rho_cur: f64,
    rho_prop: f64,
) -> f64 {
    let part = |rho: f64| {
        -0.5 * (n_cells + field_cells) as f64 * (1.0 - rho * rho).ln()
            - rho_combine(sums.w_same, sums.w_cross, rho) / (2.0 * (1.0 - r))
            - rho_combine(sums.q_same, sums.q_cross, rho) / (2.0 * r)
            + support.log_jacobian(rho)
    };
    part(rho_prop) - part(rho_cur)
}

fn adapt_scale(s: f64, iter: u64, accept_prob: f64) -> f64 {
    let gain = ((iter + 1) as f64).powf(-0.6);
    (s * (gain * (accept_prob - TARGET_ACCEPT)).exp()).clamp(1e-3, 1e3)
}

/// Which components of a cell are observed data (never overwritten) versus
/// latent (re-imputed each sweep).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CellStatus {
    BothObserved,
    OnlyFirst,
    OnlySecond,
    NoneObserved,
}

pub struct Stage3Sampler<'a> {
    w_data: &'a StandardizedPanel,
    config: Stage3Config,
    lattice: RngLattice,
    fem: FemMatrices,
    a: ProjectionMatrix,
    ata: SymSparse,
    solver: GmrfSolver,
    status: Vec<CellStatus>,
    targets: Vec<(usize, usize)>,
    two_delta: f64,
    n: usize,
    t: usize,
    nstar: usize,
}

impl<'a> Stage3Sampler<'a> {
    /// `targets`: cells whose projected field pair is retained per draw for
    /// prediction; defaults to every cell with at least one unobserved
    /// component.
    pub fn new(
        w: &'a StandardizedPanel,
        locations: &[Point2],
        mesh: &TriMesh,
        targets: Option<Vec<(usize, usize)>>,
        config: Stage3Config,
        lattice: RngLattice,
    ) -> Result<Stage3Sampler<'a>> {
        config.validate()?;
        let n = w.n();
        let t = w.t();
        if locations.len() != n {
            return Err(Error::Dimension(format!(
                "panel has {n} pixels but {} locations were given",
                locations.len()
            )));
        }
        let mut present = 0usize;
        let mut status = Vec::with_capacity(n * t);
        for tt in 0..t {
            for i in 0..n {
                let a = w.get(i, tt, Variable::Ba).is_some();
                let b = w.get(i, tt, Variable::Cnt).is_some();
                present += a as usize + b as usize;
                status.push(match (a, b) {
                    (true, true) => CellStatus::BothObserved,
                    (true, false) => CellStatus::OnlyFirst,
                    (false, true) => CellStatus::OnlySecond,
                    (false, false) => CellStatus::NoneObserved,
                });
            }
        }
        if present < t {
            return Err(Error::Parameter(format!(
                "standardized panel has only {present} observed components over {t} periods"
            )));
        }
        let targets = match targets {
            Some(list) => {
                for &(i, tt) in &list {
                    if i >= n || tt >= t {
                        return Err(Error::Dimension(format!(
                            "target cell ({i}, {tt}) outside the {n} x {t} panel"
                        )));
                    }
                }
                list
            }
            None => {
                let mut list = Vec::new();
                for tt in 0..t {
                    for i in 0..n {
                        if status[tt * n + i] != CellStatus::BothObserved {
                            list.push((i, tt));
                        }
                    }
                }
                list
            }
        };
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
        Ok(Stage3Sampler {
            w_data: w,
            config,
            lattice,
            fem,
            a,
            ata,
            solver,
            status,
            targets,
            two_delta,
            n,
            t,
            nstar,
        })
    }

    pub fn config(&self) -> &Stage3Config {
        &self.config
    }

    fn init_hypers(&self) -> (f64, f64, f64) {
        let phi = self.config.fix_phi.unwrap_or(0.05 * self.two_delta);
        let r = self.config.fix_r.unwrap_or(0.5);
        let rho = self.config.fix_rho.unwrap_or(match self.config.rho_support {
            RhoSupport::Unit => 0.5,
            RhoSupport::Symmetric => 0.0,
        });
        (phi, r, rho)
    }

    /// Initial run: fields at zero, observed cells at their data values,
    /// unobserved cells drawn once from the nugget prior.
    pub fn start(&self) -> Result<Stage3Run> {
        let (n, t) = (self.n, self.t);
        let (phi, r, rho) = self.init_hypers();
        let mut rng = self.lattice.stream(DOMAIN_INIT, 0, 0);
        let sd = (1.0 - r).sqrt();
        let cross = (1.0 - rho * rho).sqrt();
        let mut w = vec![0.0; 2 * n * t];
        for tt in 0..t {
            for i in 0..n {
                let (w1, w2) = (
                    self.w_data.get(i, tt, Variable::Ba),
                    self.w_data.get(i, tt, Variable::Cnt),
                );
                let z1 = sample_std_normal(&mut rng);
                let z2 = sample_std_normal(&mut rng);
                let v1 = w1.unwrap_or(sd * z1);
                let v2 = w2.unwrap_or_else(|| match w1 {
                    // Condition the nugget draw on an observed partner.
                    Some(o) => rho * o + sd * cross * z2,
                    None => sd * (rho * z1 + cross * z2),
                });
                w[tt * 2 * n + i] = v1;
                w[tt * 2 * n + n + i] = v2;
            }
        }
        let state = Stage3State {
            w,
            eta: vec![0.0; 2 * self.nstar * t],
            phi,
            r,
            rho,
            s_phi: self.config.s_phi,
            s_r: self.config.s_r,
            s_rho: self.config.s_rho,
        };
        Ok(Stage3Run {
            state,
            next_iter: 0,
            chain: Stage3Chain {
                n,
                t,
                draws: Vec::new(),
                targets: self.targets.clone(),
                target_means: Vec::new(),
                accept_phi: 0,
                attempt_phi: 0,
                accept_r: 0,
                attempt_r: 0,
                accept_rho: 0,
                attempt_rho: 0,
            },
        })
    }

    /// Projected field value pair at a cell.
    fn project_pair(&self, eta_t: &[f64], i: usize) -> [f64; 2] {
        [
            self.a.row_dot(i, &eta_t[..self.nstar]),
            self.a.row_dot(i, &eta_t[self.nstar..]),
        ]
    }

    fn cross_sums(&self, q: &SymSparse, state: &Stage3State) -> CrossSums {
        let (n, nstar) = (self.n, self.nstar);
        let (q_same, q_cross) = pair_sum(
            state
                .eta
                .par_chunks(2 * nstar)
                .map(|eta_t| {
                    let (e1, e2) = eta_t.split_at(nstar);
                    (q.quad_form(e1) + q.quad_form(e2), q.bilinear(e1, e2))
                })
                .collect(),
        );
        let (w_same, w_cross) = pair_sum(
            state
                .w
                .par_chunks(2 * n)
                .enumerate()
                .map(|(tt, w_t)| {
                    let eta_t = &state.eta[tt * 2 * nstar..(tt + 1) * 2 * nstar];
                    let mut same = 0.0;
                    let mut cross = 0.0;
                    for i in 0..n {
                        let m = self.project_pair(eta_t, i);
                        let e1 = w_t[i] - m[0];
                        let e2 = w_t[n + i] - m[1];
                        same += e1 * e1 + e2 * e2;
                        cross += e1 * e2;
                    }
                    (same, cross)
                })
                .collect(),
        );
        CrossSums { q_same, q_cross, w_same, w_cross }
    }

    pub fn advance(&self, run: &mut Stage3Run, until: u64) -> Result<()> {
        let until = until.min(self.config.iterations);
        if run.next_iter >= until {
            return Ok(());
        }
        let mut q = assemble_precision(&self.fem, run.state.phi)?;
        let mut q_logdet = self.solver.factor(&q)?.logdet();
        let mut m = SymSparse::zeros(self.fem.pattern().clone());
        while run.next_iter < until {
            self.step(run, &mut q, &mut q_logdet, &mut m)?;
        }
        Ok(())
    }

    fn step(
        &self,
        run: &mut Stage3Run,
        q: &mut SymSparse,
        q_logdet: &mut f64,
        m: &mut SymSparse,
    ) -> Result<()> {
        let iter = run.next_iter;
        let (n, t, nstar) = (self.n, self.t, self.nstar);
        let state = &mut run.state;
        let mut rh = self.lattice.stream(DOMAIN_HYPER, 0, iter);

        // Field weights: shared factorization, correlated component noise.
        {
            let c1 = 1.0 / (1.0 - state.r);
            for ((mv, &av), &qv) in m
                .values_mut()
                .iter_mut()
                .zip(self.ata.values())
                .zip(q.values())
            {
                *mv = c1 * av + qv / state.r;
            }
            let fm = self.solver.factor(m).map_err(|e| {
                Error::Numerical(format!(
                    "weight precision not factorizable at iteration {iter}: {e}"
                ))
            })?;
            let rho = state.rho;
            let cross = (1.0 - rho * rho).sqrt();
            let w = &state.w;
            let a = &self.a;
            let lattice = self.lattice;
            state
                .eta
                .par_chunks_mut(2 * nstar)
                .enumerate()
                .for_each(|(tt, eta_t)| {
                    let mut rt = lattice.stream(DOMAIN_FIELD, tt as u64, iter);
                    let w_t = &w[tt * 2 * n..(tt + 1) * 2 * n];
                    let mut v = vec![0.0; n];
                    for c in 0..2 {
                        for i in 0..n {
                            v[i] = c1 * w_t[c * n + i];
                        }
                        let rhs = a.mul_transpose(&v);
                        let mean = fm.solve(&rhs);
                        eta_t[c * nstar..(c + 1) * nstar].copy_from_slice(&mean);
                    }
                    let z1 = fm.sample_zero_mean(&mut rt);
                    let z2 = fm.sample_zero_mean(&mut rt);
                    for j in 0..nstar {
                        eta_t[j] += z1[j];
                        eta_t[nstar + j] += rho * z1[j] + cross * z2[j];
                    }
                });
        }
        let mut sums = self.cross_sums(q, state);

        // Range update.
        if self.config.fix_phi.is_none() {
            let z = sample_std_normal(&mut rh);
            let u: f64 = rand::Rng::gen(&mut rh);
            let phi_p =
                self.two_delta * sigmoid(logit(state.phi / self.two_delta) + state.s_phi * z);
            let q_p = assemble_precision(&self.fem, phi_p)?;
            let ld_p = self.solver.factor(&q_p)?.logdet();
            let (qs_p, qc_p) = pair_sum(
                state
                    .eta
                    .par_chunks(2 * nstar)
                    .map(|eta_t| {
                        let (e1, e2) = eta_t.split_at(nstar);
                        (q_p.quad_form(e1) + q_p.quad_form(e2), q_p.bilinear(e1, e2))
                    })
                    .collect(),
            );
            let lr = phi3_log_ratio(
                t,
                state.r,
                state.rho,
                self.two_delta,
                (state.phi, *q_logdet, sums.q_same, sums.q_cross),
                (phi_p, ld_p, qs_p, qc_p),
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
                *q = q_p;
                *q_logdet = ld_p;
                sums.q_same = qs_p;
                sums.q_cross = qc_p;
            }
            if self.config.adapt && iter < self.config.burn_in {
                state.s_phi = adapt_scale(state.s_phi, iter, lr.exp().min(1.0));
            }
        }

        // Variance-ratio update.
        if self.config.fix_r.is_none() {
            let z = sample_std_normal(&mut rh);
            let u: f64 = rand::Rng::gen(&mut rh);
            let r_p = sigmoid(logit(state.r) + state.s_r * z);
            let lr = r3_log_ratio(n * t, nstar * t, &sums, state.rho, state.r, r_p);
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

        // Cross-correlation update.
        if self.config.fix_rho.is_none() {
            let z = sample_std_normal(&mut rh);
            let u: f64 = rand::Rng::gen(&mut rh);
            let support = self.config.rho_support;
            let rho_p = support.from_logit(support.to_logit(state.rho) + state.s_rho * z);
            let lr = if support.contains(rho_p) {
                rho3_log_ratio(n * t, nstar * t, &sums, state.r, support, state.rho, rho_p)
            } else {
                f64::NEG_INFINITY
            };
            if lr.is_nan() {
                return Err(Error::Numerical(format!(
                    "non-finite cross-correlation acceptance ratio at iteration {iter}"
                )));
            }
            run.chain.attempt_rho += 1;
            if u.ln() < lr {
                run.chain.accept_rho += 1;
                state.rho = rho_p;
            }
            if self.config.adapt && iter < self.config.burn_in {
                state.s_rho = adapt_scale(state.s_rho, iter, lr.exp().min(1.0));
            }
        }

        // Imputation of unobserved components from the nugget conditional.
        {
            let sd = (1.0 - state.r).sqrt();
            let rho = state.rho;
            let cross = (1.0 - rho * rho).sqrt();
            let eta = &state.eta;
            let status = &self.status;
            let lattice = self.lattice;
            let sampler = &*self;
            state.w.par_chunks_mut(2 * n).enumerate().for_each(|(tt, w_t)| {
                let mut rt = lattice.stream(DOMAIN_PERIOD, tt as u64, iter);
                let eta_t = &eta[tt * 2 * nstar..(tt + 1) * 2 * nstar];
                for i in 0..n {
                    let st = status[tt * n + i];
                    if st == CellStatus::BothObserved {
                        continue;
                    }
                    let mv = sampler.project_pair(eta_t, i);
                    match st {
                        CellStatus::NoneObserved => {
                            let z1 = sample_std_normal(&mut rt);
                            let z2 = sample_std_normal(&mut rt);
                            w_t[i] = mv[0] + sd * z1;
                            w_t[n + i] = mv[1] + sd * (rho * z1 + cross * z2);
                        }
                        CellStatus::OnlyFirst => {
                            let z = sample_std_normal(&mut rt);
                            w_t[n + i] = mv[1] + rho * (w_t[i] - mv[0]) + sd * cross * z;
                        }
                        CellStatus::OnlySecond => {
                            let z = sample_std_normal(&mut rt);
                            w_t[i] = mv[0] + rho * (w_t[n + i] - mv[1]) + sd * cross * z;
                        }
                        CellStatus::BothObserved => unreachable!(),
                    }
                }
            });
        }

        if !(state.phi.is_finite() && state.r.is_finite() && state.rho.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite hyperparameters at iteration {iter}"
            )));
        }

        if iter >= self.config.burn_in && (iter - self.config.burn_in) % self.config.thin == 0 {
            run.chain.draws.push(Stage3Draw {
                phi: state.phi,
                r: state.r,
                rho: state.rho,
            });
            for &(i, tt) in &self.targets {
                let eta_t = &state.eta[tt * 2 * nstar..(tt + 1) * 2 * nstar];
                run.chain.target_means.push(self.project_pair(eta_t, i));
            }
        }
        run.next_iter = iter + 1;
        Ok(())
    }
}

/// Fit the bivariate severity chain end to end, retaining projected-field
/// pairs at every cell with an unobserved component.
pub fn run_stage3(
    w: &StandardizedPanel,
    locations: &[Point2],
    mesh: &TriMesh,
    config: &Stage3Config,
    lattice: RngLattice,
) -> Result<Stage3Chain> {
    let sampler = Stage3Sampler::new(w, locations, mesh, None, config.clone(), lattice)?;
    let mut run = sampler.start()?;
    sampler.advance(&mut run, config.iterations)?;
    Ok(run.chain)
}

/// Per-draw imputations of the unobserved components at one target cell:
/// both-missing cells draw from `N_2(m, (1-r) S_rho)`, one-missing cells
/// from the univariate conditional given the observed partner. Observed
/// components are returned unchanged.
pub fn impute_missing_w(
    chain: &Stage3Chain,
    w: &StandardizedPanel,
    cell: (usize, usize),
    rng: &mut impl rand::Rng,
) -> Result<Vec<[f64; 2]>> {
    let k = chain
        .target_index(cell)
        .ok_or_else(|| Error::Parameter(format!("cell {cell:?} is not a retained target")))?;
    let (i, tt) = cell;
    let obs1 = w.get(i, tt, Variable::Ba);
    let obs2 = w.get(i, tt, Variable::Cnt);
    if obs1.is_some() && obs2.is_some() {
        return Err(Error::Parameter(format!(
            "cell {cell:?} has both components observed; nothing to impute"
        )));
    }
    let mut out = Vec::with_capacity(chain.len());
    for (d, draw) in chain.draws.iter().enumerate() {
        let m = chain.target_mean(d, k);
        let sd = (1.0 - draw.r).max(0.0).sqrt();
        let cross = (1.0 - draw.rho * draw.rho).sqrt();
        let pair = match (obs1, obs2) {
            (None, None) => {
                let z1 = sample_std_normal(rng);
                let z2 = sample_std_normal(rng);
                [
                    m[0] + sd * z1,
                    m[1] + sd * (draw.rho * z1 + cross * z2),
                ]
            }
            (Some(o1), None) => {
                let z = sample_std_normal(rng);
                [o1, m[1] + draw.rho * (o1 - m[0]) + sd * cross * z]
            }
            (None, Some(o2)) => {
                let z = sample_std_normal(rng);
                [m[0] + draw.rho * (o2 - m[1]) + sd * cross * z, o2]
            }
            (Some(_), Some(_)) => unreachable!(),
        };
        out.push(pair);
    }
    Ok(out)
}

/// Chain-averaged positive-part CDF at one target cell for one variable:
/// mean over draws of `F_LN(u; mu + sigma m, sigma^2 v)` where (m, v) is
/// the per-draw conditional law of the standardized value given the field
/// and (when present) the observed partner component.
pub fn positive_cdf_mean(
    chain: &Stage3Chain,
    w: &StandardizedPanel,
    cell: (usize, usize),
    variable: Variable,
    mu: f64,
    sigma: f64,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("log-scale SD {sigma} must be positive")));
    }
    if chain.is_empty() {
        return Err(Error::Parameter("severity chain has no retained draws".into()));
    }
    let k = chain
        .target_index(cell)
        .ok_or_else(|| Error::Parameter(format!("cell {cell:?} is not a retained target")))?;
    let (i, tt) = cell;
    let (own_idx, partner) = match variable {
        Variable::Ba => (0usize, w.get(i, tt, Variable::Cnt)),
        Variable::Cnt => (1usize, w.get(i, tt, Variable::Ba)),
    };
    let mut acc = vec![0.0; thresholds.len()];
    for (d, draw) in chain.draws.iter().enumerate() {
        let m = chain.target_mean(d, k);
        let (mean_w, var_w) = match partner {
            Some(o) => (
                m[own_idx] + draw.rho * (o - m[1 - own_idx]),
                (1.0 - draw.r) * (1.0 - draw.rho * draw.rho),
            ),
            None => (m[own_idx], 1.0 - draw.r),
        };
        let ln_mu = mu + sigma * mean_w;
        let ln_sd = sigma * var_w.max(1e-300).sqrt();
        for (j, &u) in thresholds.iter().enumerate() {
            acc[j] += lognormal_cdf(u, ln_mu, ln_sd);
        }
    }
    let len = chain.len() as f64;
    for v in &mut acc {
        *v /= len;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ba_thresholds;
    use crate::gmrf::{approx_covariance, MaternParams};
    use crate::mesh::{build_mesh, MeshConfig};
    use crate::occurrence::{phi_log_ratio, r_log_ratio};
    use crate::rngx::derive_seed;
    use nalgebra::{DMatrix, DVector};

    fn grid(nx: usize, ny: usize, spacing: f64) -> Vec<Point2> {
        let mut pts = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                pts.push(Point2::new(i as f64 * spacing, j as f64 * spacing));
            }
        }
        pts
    }

    fn small_mesh(locations: &[Point2]) -> TriMesh {
        let config = MeshConfig {
            extension_margin: 0.3,
            node_target_ratio: None,
            ..MeshConfig::default()
        };
        build_mesh(locations, &config).unwrap()
    }

    /// Simulate a complete standardized panel from the model itself.
    fn simulate_panel(
        locations: &[Point2],
        mesh: &TriMesh,
        t: usize,
        phi: f64,
        r: f64,
        rho: f64,
        seed: u64,
    ) -> StandardizedPanel {
        let n = locations.len();
        let fem = assemble_fem(mesh).unwrap();
        let a = project(mesh, locations).unwrap();
        let q = assemble_precision(&fem, phi).unwrap();
        let solver = GmrfSolver::new(fem.pattern());
        let factor = solver.factor(&q).unwrap();
        let mut rng = RngLattice::new(seed).stream(crate::rngx::DOMAIN_SIM, 0, 0);
        let sqr = r.sqrt();
        let sd = (1.0 - r).sqrt();
        let cross = (1.0 - rho * rho).sqrt();
        let mut w1 = Vec::with_capacity(n * t);
        let mut w2 = Vec::with_capacity(n * t);
        for _ in 0..t {
            let f1 = factor.sample_zero_mean(&mut rng);
            let f2 = factor.sample_zero_mean(&mut rng);
            for i in 0..n {
                let g1 = a.row_dot(i, &f1);
                let g2 = a.row_dot(i, &f2);
                let e1 = sample_std_normal(&mut rng);
                let e2 = sample_std_normal(&mut rng);
                w1.push(Some(sqr * g1 + sd * e1));
                w2.push(Some(
                    sqr * (rho * g1 + cross * g2) + sd * (rho * e1 + cross * e2),
                ));
            }
        }
        StandardizedPanel::new(n, t, w1, w2).unwrap()
    }

    #[test]
    fn predictive_cdf_mixture_values() {
        // Zero threshold carries exactly the point mass.
        assert!((predictive_cdf(0.6, 1.0, 0.5, 0.0).unwrap() - 0.4).abs() < 1e-15);
        // Lognormal median splits the positive mass in half.
        let f = predictive_cdf(0.6, 1.0, 0.5, 1.0f64.exp()).unwrap();
        assert!((f - 0.7).abs() < 1e-12);
        // Far tail.
        let big = (1.0f64 + 10.0 * 0.5f64.sqrt()).exp();
        assert!(predictive_cdf(0.6, 1.0, 0.5, big).unwrap() >= 1.0 - 1e-6);
        // Parameter validation.
        assert!(predictive_cdf(1.2, 0.0, 1.0, 0.0).is_err());
        assert!(predictive_cdf(0.5, 0.0, 0.0, 0.0).is_err());
        assert!(predictive_cdf(0.5, 0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn predictive_cdf_nondecreasing_over_random_draws() {
        let mut rng = RngLattice::new(5).stream(crate::rngx::DOMAIN_SIM, 1, 0);
        let thresholds = ba_thresholds();
        for _ in 0..25 {
            let p: f64 = rand::Rng::gen(&mut rng);
            let mu = 3.0 * sample_std_normal(&mut rng);
            let sigma2 = 0.1 + rand::Rng::gen::<f64>(&mut rng) * 3.0;
            let mut last = 0.0;
            for &u in &thresholds {
                let f = predictive_cdf(p, mu, sigma2, u).unwrap();
                assert!(f >= last - 1e-15 && (0.0..=1.0).contains(&f));
                last = f;
            }
        }
    }

    /// The component-wise posterior mean of the field weights must match a
    /// dense solve of the full 2N* Kronecker system, and must not change
    /// when rho does.
    #[test]
    fn eta_conditional_mean_matches_dense_kronecker_solve() {
        let locations = grid(3, 2, 1.0);
        let n = locations.len();
        let mesh = small_mesh(&locations);
        let fem = assemble_fem(&mesh).unwrap();
        let a = project(&mesh, &locations).unwrap();
        let nstar = fem.n();
        let (phi, r, rho) = (1.2, 0.6, 0.45);
        let q = assemble_precision(&fem, phi).unwrap();
        let ata = a.normal_matrix(fem.pattern());
        let solver = GmrfSolver::new(fem.pattern());

        let mut rng = RngLattice::new(31).stream(crate::rngx::DOMAIN_SIM, 2, 0);
        let w: Vec<f64> = (0..2 * n).map(|_| sample_std_normal(&mut rng)).collect();

        // Sampler path: M^{-1} A' W_c / (1 - r) per component.
        let mut m = SymSparse::zeros(fem.pattern().clone());
        for ((mv, &av), &qv) in m
            .values_mut()
            .iter_mut()
            .zip(ata.values())
            .zip(q.values())
        {
            *mv = av / (1.0 - r) + qv / r;
        }
        let fm = solver.factor(&m).unwrap();
        let mut got = Vec::new();
        for c in 0..2 {
            let v: Vec<f64> = (0..n).map(|i| w[c * n + i] / (1.0 - r)).collect();
            got.extend(fm.solve(&a.mul_transpose(&v)));
        }

        // Dense path: invert S_rho^{-1} (x) M against the full linear term,
        // which does involve rho on both sides.
        let md = m.to_dense();
        let s_inv = DMatrix::from_row_slice(2, 2, &[1.0, -rho, -rho, 1.0])
            / (1.0 - rho * rho);
        let mut prec = DMatrix::zeros(2 * nstar, 2 * nstar);
        for bi in 0..2 {
            for bj in 0..2 {
                for x in 0..nstar {
                    for y in 0..nstar {
                        prec[(bi * nstar + x, bj * nstar + y)] = s_inv[(bi, bj)] * md[(x, y)];
                    }
                }
            }
        }
        let mut lin = DVector::zeros(2 * nstar);
        for bi in 0..2 {
            for bj in 0..2 {
                let v: Vec<f64> = (0..n)
                    .map(|i| s_inv[(bi, bj)] * w[bj * n + i] / (1.0 - r))
                    .collect();
                let atv = a.mul_transpose(&v);
                for x in 0..nstar {
                    lin[bi * nstar + x] += atv[x];
                }
            }
        }
        let want = nalgebra::Cholesky::new(prec).unwrap().solve(&lin);
        for j in 0..2 * nstar {
            assert!(
                (got[j] - want[j]).abs() < 1e-10,
                "component mean {j}: {} vs {}",
                got[j],
                want[j]
            );
        }
    }

    /// All three acceptance ratios must agree with dense evaluations of the
    /// full 2N*-dimensional Kronecker Gaussians.
    #[test]
    fn acceptance_ratios_match_dense_kronecker_oracle() {
        let locations = grid(3, 2, 1.0);
        let n = locations.len();
        let mesh = small_mesh(&locations);
        let fem = assemble_fem(&mesh).unwrap();
        let a = project(&mesh, &locations).unwrap();
        let nstar = fem.n();
        let t = 3usize;
        let two_delta = 7.0;
        let (phi_c, phi_p) = (1.1, 1.7);
        let (r_c, r_p) = (0.55, 0.68);
        let (rho_c, rho_p) = (0.35, 0.52);

        let mut rng = RngLattice::new(33).stream(crate::rngx::DOMAIN_SIM, 3, 0);
        let eta: Vec<f64> = (0..2 * nstar * t).map(|_| sample_std_normal(&mut rng)).collect();
        let w: Vec<f64> = (0..2 * n * t).map(|_| 0.8 * sample_std_normal(&mut rng)).collect();

        let solver = GmrfSolver::new(fem.pattern());
        let q_of = |phi: f64| assemble_precision(&fem, phi).unwrap();
        let sums_of = |q: &SymSparse| {
            let mut s = CrossSums { q_same: 0.0, q_cross: 0.0, w_same: 0.0, w_cross: 0.0 };
            for tt in 0..t {
                let eta_t = &eta[tt * 2 * nstar..(tt + 1) * 2 * nstar];
                let (e1, e2) = eta_t.split_at(nstar);
                s.q_same += q.quad_form(e1) + q.quad_form(e2);
                s.q_cross += q.bilinear(e1, e2);
                for i in 0..n {
                    let m1 = a.row_dot(i, e1);
                    let m2 = a.row_dot(i, e2);
                    let r1 = w[tt * 2 * n + i] - m1;
                    let r2 = w[tt * 2 * n + n + i] - m2;
                    s.w_same += r1 * r1 + r2 * r2;
                    s.w_cross += r1 * r2;
                }
            }
            s
        };

        // Dense log density of all eta_t under (phi, r, rho) plus all
        // nugget residuals under (r, rho).
        let dense_logpost = |phi: f64, r: f64, rho: f64| -> f64 {
            let qd = q_of(phi).to_dense();
            let s_inv =
                DMatrix::from_row_slice(2, 2, &[1.0, -rho, -rho, 1.0]) / (1.0 - rho * rho);
            let mut prec = DMatrix::zeros(2 * nstar, 2 * nstar);
            for bi in 0..2 {
                for bj in 0..2 {
                    for x in 0..nstar {
                        for y in 0..nstar {
                            prec[(bi * nstar + x, bj * nstar + y)] =
                                s_inv[(bi, bj)] * qd[(x, y)] / r;
                        }
                    }
                }
            }
            let chol = nalgebra::Cholesky::new(prec.clone()).unwrap();
            let logdet: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
            let mut ll = 0.0;
            for tt in 0..t {
                let v = DVector::from_column_slice(&eta[tt * 2 * nstar..(tt + 1) * 2 * nstar]);
                ll += 0.5 * logdet - 0.5 * (&prec * &v).dot(&v);
            }
            // Nugget: per cell a bivariate normal with covariance (1-r) S_rho.
            let det_nugget = (1.0 - r) * (1.0 - r) * (1.0 - rho * rho);
            for tt in 0..t {
                let eta_t = &eta[tt * 2 * nstar..(tt + 1) * 2 * nstar];
                let (e1, e2) = eta_t.split_at(nstar);
                for i in 0..n {
                    let r1 = w[tt * 2 * n + i] - a.row_dot(i, e1);
                    let r2 = w[tt * 2 * n + n + i] - a.row_dot(i, e2);
                    let quad = (r1 * r1 - 2.0 * rho * r1 * r2 + r2 * r2)
                        / ((1.0 - rho * rho) * (1.0 - r));
                    ll += -0.5 * det_nugget.ln() - 0.5 * quad;
                }
            }
            ll
        };

        let q_c = q_of(phi_c);
        let q_p = q_of(phi_p);
        let ld = |q: &SymSparse| solver.factor(q).unwrap().logdet();
        let sums_c = sums_of(&q_c);
        let sums_p = sums_of(&q_p);

        let got_phi = phi3_log_ratio(
            t,
            r_c,
            rho_c,
            two_delta,
            (phi_c, ld(&q_c), sums_c.q_same, sums_c.q_cross),
            (phi_p, ld(&q_p), sums_p.q_same, sums_p.q_cross),
        );
        let want_phi = dense_logpost(phi_p, r_c, rho_c) - dense_logpost(phi_c, r_c, rho_c)
            + (phi_p * (two_delta - phi_p)).ln()
            - (phi_c * (two_delta - phi_c)).ln();
        assert!((got_phi - want_phi).abs() < 1e-10, "{got_phi} vs {want_phi}");

        let got_r = r3_log_ratio(n * t, nstar * t, &sums_c, rho_c, r_c, r_p);
        let want_r = dense_logpost(phi_c, r_p, rho_c) - dense_logpost(phi_c, r_c, rho_c)
            + (r_p * (1.0 - r_p)).ln()
            - (r_c * (1.0 - r_c)).ln();
        assert!((got_r - want_r).abs() < 1e-10, "{got_r} vs {want_r}");

        let got_rho = rho3_log_ratio(
            n * t,
            nstar * t,
            &sums_c,
            r_c,
            RhoSupport::Unit,
            rho_c,
            rho_p,
        );
        let want_rho = dense_logpost(phi_c, r_c, rho_p) - dense_logpost(phi_c, r_c, rho_c)
            + (rho_p * (1.0 - rho_p)).ln()
            - (rho_c * (1.0 - rho_c)).ln();
        assert!((got_rho - want_rho).abs() < 1e-10, "{got_rho} vs {want_rho}");
    }

    /// Monte Carlo covariance of fields simulated from the model must match
    /// the Kronecker form (cross-correlation 2x2) (x) ((1-r) I + r A Q^{-1} A').
    #[test]
    fn simulated_field_covariance_is_kronecker_separable() {
        let locations = grid(5, 4, 1.0);
        let n = locations.len();
        let mesh = small_mesh(&locations);
        let (phi, r, rho) = (2.0, 0.7, 0.5);
        // Max-abs over 1600 covariance entries sits around four sigma of
        // its per-entry Monte Carlo noise; 40k replicates keep that below
        // the 0.05 bound with margin.
        let reps = 40_000;
        let panel = simulate_panel(&locations, &mesh, reps, phi, r, rho, 99);

        let fem = assemble_fem(&mesh).unwrap();
        let a = project(&mesh, &locations).unwrap();
        let params = MaternParams::new(phi, r).unwrap();
        let spatial = approx_covariance(&a, &fem, &params, 200).unwrap();

        let get = |tt: usize, c: usize, i: usize| -> f64 {
            let var = if c == 0 { Variable::Ba } else { Variable::Cnt };
            panel.get(i, tt, var).unwrap()
        };
        let mut max_dev = 0.0f64;
        for ci in 0..2 {
            for cj in 0..2 {
                for i in 0..n {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for tt in 0..reps {
                            acc += get(tt, ci, i) * get(tt, cj, j);
                        }
                        let emp = acc / reps as f64;
                        let want =
                            if ci == cj { spatial[(i, j)] } else { rho * spatial[(i, j)] };
                        max_dev = max_dev.max((emp - want).abs());
                    }
                }
            }
        }
        assert!(max_dev < 0.05, "covariance deviates from Kronecker form by {max_dev}");
    }

    /// With the cross-correlation pinned at zero the bivariate likelihood
    /// factorizes into independent per-component field draws, so the
    /// (phi, r) posterior equals that of a univariate chain on the
    /// 2T-period panel that stacks both components. Two-sample KS on the
    /// retained range draws checks the match.
    #[test]
    fn rho_zero_bivariate_matches_stacked_univariate_chain() {
        let locations = grid(4, 4, 1.5);
        let n = locations.len();
        let t = 8;
        let mesh = small_mesh(&locations);
        let (phi_true, r_true) = (2.5, 0.7);
        let full = simulate_panel(&locations, &mesh, t, phi_true, r_true, 0.0, 17);

        // KS resolution: ~2000 retained draws per chain with wide thinning
        // keep the effective sample size well above the 0.05 noise floor.
        let (iters, burn, thin) = (32_000u64, 2_000u64, 15u64);
        let config = Stage3Config {
            iterations: iters,
            burn_in: burn,
            thin,
            fix_rho: Some(0.0),
            ..Stage3Config::default()
        };
        let chain = run_stage3(
            &full,
            &locations,
            &mesh,
            &config,
            RngLattice::new(derive_seed(3, "biv")),
        )
        .unwrap();
        let mut biv: Vec<f64> = chain.draws.iter().map(|d| d.phi).collect();

        // Univariate reference on the stacked panel, built from the same
        // primitives: periods 0..T carry component 1, T..2T component 2.
        let t2 = 2 * t;
        let fem = assemble_fem(&mesh).unwrap();
        let a = project(&mesh, &locations).unwrap();
        let ata = a.normal_matrix(fem.pattern());
        let solver = GmrfSolver::new(fem.pattern());
        let nstar = fem.n();
        let two_delta = 2.0 * domain_diameter(&locations);
        let lattice = RngLattice::new(derive_seed(4, "uni"));
        let mut w: Vec<f64> = Vec::with_capacity(n * t2);
        for variable in [Variable::Ba, Variable::Cnt] {
            for tt in 0..t {
                for i in 0..n {
                    w.push(full.get(i, tt, variable).unwrap());
                }
            }
        }
        let t = t2;
        let mut eta = vec![0.0; nstar * t];
        let (mut phi, mut r) = (0.05 * two_delta, 0.5);
        let (mut s_phi, mut s_r) = (0.3, 0.3);
        let mut q = assemble_precision(&fem, phi).unwrap();
        let mut q_logdet = solver.factor(&q).unwrap().logdet();
        let mut m = SymSparse::zeros(fem.pattern().clone());
        let mut uni = Vec::new();
        for iter in 0..iters {
            let mut rh = lattice.stream(DOMAIN_HYPER, 0, iter);
            for ((mv, &av), &qv) in
                m.values_mut().iter_mut().zip(ata.values()).zip(q.values())
            {
                *mv = av / (1.0 - r) + qv / r;
            }
            let fm = solver.factor(&m).unwrap();
            for tt in 0..t {
                let mut rt = lattice.stream(DOMAIN_FIELD, tt as u64, iter);
                let v: Vec<f64> = (0..n).map(|i| w[tt * n + i] / (1.0 - r)).collect();
                let rhs = a.mul_transpose(&v);
                let draw = fm.sample_from_precision(&rhs, &mut rt);
                eta[tt * nstar..(tt + 1) * nstar].copy_from_slice(&draw);
            }
            let quads: f64 = eta.chunks(nstar).map(|e| q.quad_form(e)).sum();
            // Range.
            {
                let z = sample_std_normal(&mut rh);
                let u: f64 = rand::Rng::gen(&mut rh);
                let phi_p = two_delta * sigmoid(logit(phi / two_delta) + s_phi * z);
                let q_p = assemble_precision(&fem, phi_p).unwrap();
                let ld_p = solver.factor(&q_p).unwrap().logdet();
                let quads_p: f64 = eta.chunks(nstar).map(|e| q_p.quad_form(e)).sum();
                let lr = phi_log_ratio(
                    t,
                    r,
                    two_delta,
                    (phi, q_logdet, quads),
                    (phi_p, ld_p, quads_p),
                );
                if u.ln() < lr {
                    phi = phi_p;
                    q = q_p;
                    q_logdet = ld_p;
                }
                if iter < burn {
                    s_phi = adapt_scale(s_phi, iter, lr.exp().min(1.0));
                }
            }
            // Ratio.
            {
                let z = sample_std_normal(&mut rh);
                let u: f64 = rand::Rng::gen(&mut rh);
                let r_p = sigmoid(logit(r) + s_r * z);
                let quads: f64 = eta.chunks(nstar).map(|e| q.quad_form(e)).sum();
                let sse: f64 = (0..n * t)
                    .map(|cell| {
                        let d = w[cell] - a.row_dot(cell % n, &eta[(cell / n) * nstar..(cell / n + 1) * nstar]);
                        d * d
                    })
                    .sum();
                let lr = r_log_ratio(n * t, nstar * t, sse, quads, r, r_p);
                if u.ln() < lr {
                    r = r_p;
                }
                if iter < burn {
                    s_r = adapt_scale(s_r, iter, lr.exp().min(1.0));
                }
            }
            if iter >= burn && (iter - burn) % thin == 0 {
                uni.push(phi);
            }
        }

        biv.sort_by(|a, b| a.partial_cmp(b).unwrap());
        uni.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Two-sample KS.
        let (mut i, mut j, mut ks) = (0usize, 0usize, 0.0f64);
        while i < biv.len() && j < uni.len() {
            if biv[i] <= uni[j] {
                i += 1;
            } else {
                j += 1;
            }
            ks = ks.max((i as f64 / biv.len() as f64 - j as f64 / uni.len() as f64).abs());
        }
        assert!(ks < 0.05, "KS distance {ks} between bivariate-marginal and univariate range chains");
    }

    /// Imputed pairs at fully-missing cells must carry the posterior
    /// cross-correlation.
    #[test]
    fn imputed_pairs_reproduce_cross_correlation() {
        let locations = grid(4, 3, 1.5);
        let n = locations.len();
        let t = 20;
        let mesh = small_mesh(&locations);
        let (phi_true, r_true, rho_true) = (2.5, 0.5, 0.6);
        let full = simulate_panel(&locations, &mesh, t, phi_true, r_true, rho_true, 55);
        // Hide both components at a block of cells.
        let mut w1 = Vec::new();
        let mut w2 = Vec::new();
        let mut hidden = Vec::new();
        for tt in 0..t {
            for i in 0..n {
                if (i + tt) % 5 == 0 {
                    hidden.push((i, tt));
                    w1.push(None);
                    w2.push(None);
                } else {
                    w1.push(full.get(i, tt, Variable::Ba));
                    w2.push(full.get(i, tt, Variable::Cnt));
                }
            }
        }
        let masked = StandardizedPanel::new(n, t, w1, w2).unwrap();
        let config = Stage3Config {
            iterations: 4000,
            burn_in: 1000,
            thin: 3,
            ..Stage3Config::default()
        };
        let chain = run_stage3(
            &masked,
            &locations,
            &mesh,
            &config,
            RngLattice::new(derive_seed(8, "imp")),
        )
        .unwrap();
        let rho_mean: f64 =
            chain.draws.iter().map(|d| d.rho).sum::<f64>() / chain.len() as f64;

        let mut rng = RngLattice::new(1234).stream(crate::rngx::DOMAIN_SIM, 9, 0);
        let (mut s1, mut s2, mut s11, mut s22, mut s12, mut count) =
            (0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
        for &cell in &hidden {
            for pair in impute_missing_w(&chain, &masked, cell, &mut rng).unwrap() {
                // Center on the per-cell field mean so the correlation
                // reflects the nugget, not field variation across cells.
                let k = chain.target_index(cell).unwrap();
                let _ = k;
                s1 += pair[0];
                s2 += pair[1];
                s11 += pair[0] * pair[0];
                s22 += pair[1] * pair[1];
                s12 += pair[0] * pair[1];
                count += 1;
            }
        }
        let c = count as f64;
        let cov = s12 / c - (s1 / c) * (s2 / c);
        let v1 = s11 / c - (s1 / c) * (s1 / c);
        let v2 = s22 / c - (s2 / c) * (s2 / c);
        let corr = cov / (v1 * v2).sqrt();
        assert!(
            (corr - rho_mean).abs() < 0.05,
            "imputed-pair correlation {corr} vs posterior mean rho {rho_mean}"
        );
    }

    /// Limit behavior of the one-cell imputation conditional.
    #[test]
    fn imputation_limit_cases() {
        let n = 3;
        let t = 2;
        // Cell (1, 0): component 1 observed at 0.9, component 2 missing;
        // cell (2, 1): both missing.
        let mut w1 = vec![None; n * t];
        let mut w2 = vec![None; n * t];
        w1[1] = Some(0.9);
        for i in 0..n * t {
            if i != 1 && i != n + 2 && i != 2 {
                w1[i] = w1[i].or(Some(0.1));
                w2[i] = w2[i].or(Some(-0.2));
            }
        }
        let panel = StandardizedPanel::new(n, t, w1, w2).unwrap();
        let targets = vec![(1usize, 0usize), (2usize, 1usize)];
        let m_pair = [0.3, -0.4];
        let make_chain = |r: f64, rho: f64, draws: usize| Stage3Chain {
            n,
            t,
            draws: vec![Stage3Draw { phi: 1.0, r, rho }; draws],
            targets: targets.clone(),
            target_means: vec![m_pair; draws * targets.len()],
            accept_phi: 0,
            attempt_phi: 0,
            accept_r: 0,
            attempt_r: 0,
            accept_rho: 0,
            attempt_rho: 0,
        };

        // r -> 1: imputation collapses to the conditional mean.
        let mut rng = RngLattice::new(2).stream(crate::rngx::DOMAIN_SIM, 11, 0);
        let chain = make_chain(1.0 - 1e-12, 0.4, 50);
        for pair in impute_missing_w(&chain, &panel, (2, 1), &mut rng).unwrap() {
            assert!((pair[0] - m_pair[0]).abs() < 1e-5);
            assert!((pair[1] - m_pair[1]).abs() < 1e-5);
        }

        // rho -> 1 with component 1 observed: mean of the imputed partner
        // approaches m2 + (w1 - m1).
        let chain = make_chain(0.5, 1.0 - 1e-12, 400);
        let draws = impute_missing_w(&chain, &panel, (1, 0), &mut rng).unwrap();
        let mean2: f64 = draws.iter().map(|p| p[1]).sum::<f64>() / draws.len() as f64;
        let want = m_pair[1] + (0.9 - m_pair[0]);
        assert!((mean2 - want).abs() < 0.02, "{mean2} vs {want}");
        for p in &draws {
            assert_eq!(p[0], 0.9, "observed component must pass through unchanged");
        }

        // rho = 0 with component 1 observed: imputed component independent
        // of the observed value.
        let chain = make_chain(0.5, 0.0, 10_000);
        let draws = impute_missing_w(&chain, &panel, (1, 0), &mut rng).unwrap();
        let m2: f64 = draws.iter().map(|p| p[1]).sum::<f64>() / draws.len() as f64;
        let sd2: f64 = (draws.iter().map(|p| (p[1] - m2).powi(2)).sum::<f64>()
            / draws.len() as f64)
            .sqrt();
        // Zero correlation means the conditional never moves with w1: the
        // draws must center on m2 with nugget spread sqrt(1 - r).
        assert!((m2 - m_pair[1]).abs() < 0.02);
        assert!((sd2 - 0.5f64.sqrt()).abs() < 0.02);

        // Fully observed cells cannot be imputed.
        assert!(impute_missing_w(&chain, &panel, (0, 0), &mut rng).is_err());
    }

    #[test]
    fn positive_cdf_mean_conditions_on_partner() {
        let n = 2;
        let t = 1;
        let panel = StandardizedPanel::new(
            n,
            t,
            vec![None, None],
            vec![Some(1.5), None],
        )
        .unwrap();
        let targets = vec![(0usize, 0usize), (1usize, 0usize)];
        let chain = Stage3Chain {
            n,
            t,
            draws: vec![Stage3Draw { phi: 1.0, r: 0.5, rho: 0.8 }],
            targets,
            target_means: vec![[0.0, 0.0], [0.0, 0.0]],
            accept_phi: 0,
            attempt_phi: 0,
            accept_r: 0,
            attempt_r: 0,
            accept_rho: 0,
            attempt_rho: 0,
        };
        let thresholds = [0.5, 1.0, 2.0, 8.0];
        // Cell 0 conditions on the positive observed partner (w2 = 1.5),
        // which lifts the conditional mean, shifting mass upward relative
        // to the unconditioned cell 1.
        let with_partner =
            positive_cdf_mean(&chain, &panel, (0, 0), Variable::Ba, 0.0, 1.0, &thresholds)
                .unwrap();
        let without =
            positive_cdf_mean(&chain, &panel, (1, 0), Variable::Ba, 0.0, 1.0, &thresholds)
                .unwrap();
        for (a, b) in with_partner.iter().zip(&without) {
            assert!(a < b, "conditioning on a high partner must shift the CDF right");
        }
        // Exact value check: conditional law of W1 is
        // N(rho * 1.5, (1-r)(1-rho^2)).
        let mean_w = 0.8 * 1.5;
        let var_w: f64 = 0.5 * (1.0 - 0.64);
        for (j, &u) in thresholds.iter().enumerate() {
            let want = lognormal_cdf(u, mean_w, var_w.sqrt());
            assert!((with_partner[j] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn chunked_advance_matches_single_advance() {
        let locations = grid(3, 3, 1.0);
        let mesh = small_mesh(&locations);
        let full = simulate_panel(&locations, &mesh, 4, 1.5, 0.6, 0.4, 7);
        // Knock out a few cells so imputation paths run.
        let n = locations.len();
        let mut w1: Vec<Option<f64>> = Vec::new();
        let mut w2: Vec<Option<f64>> = Vec::new();
        for tt in 0..4 {
            for i in 0..n {
                w1.push(if (i + tt) % 6 == 1 { None } else { full.get(i, tt, Variable::Ba) });
                w2.push(if (i + tt) % 7 == 2 { None } else { full.get(i, tt, Variable::Cnt) });
            }
        }
        let panel = StandardizedPanel::new(n, 4, w1, w2).unwrap();
        let config = Stage3Config {
            iterations: 50,
            burn_in: 10,
            thin: 1,
            ..Stage3Config::default()
        };
        let lattice = RngLattice::new(64);
        let sampler =
            Stage3Sampler::new(&panel, &locations, &mesh, None, config, lattice).unwrap();
        let mut one = sampler.start().unwrap();
        sampler.advance(&mut one, 50).unwrap();
        let mut chunked = sampler.start().unwrap();
        sampler.advance(&mut chunked, 20).unwrap();
        sampler.advance(&mut chunked, 50).unwrap();
        assert_eq!(one.state, chunked.state);
        assert_eq!(one.chain.draws, chunked.chain.draws);
        assert_eq!(one.chain.target_means, chunked.chain.target_means);

        // Same bits from a single-thread pool: checkpoints are portable
        // across thread counts.
        let serial = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| {
                let mut run = sampler.start().unwrap();
                sampler.advance(&mut run, 50).unwrap();
                run
            });
        assert_eq!(one.state, serial.state);
        assert_eq!(one.chain.draws, serial.chain.draws);
        assert_eq!(one.chain.target_means, serial.chain.target_means);
    }
}
