//! Synthetic panel generator: draws (BA, CNT) panels from the full
//! generative model with known parameters, so every recovery and
//! end-to-end test can compare against recorded truth.
//!
//! The generator composes the three latent layers exactly as the samplers
//! assume them. Occurrence: X_t = mu_Z + A eps*_t + sqrt(1 - r_eps) e_t
//! with eps*_t ~ N(0, r_eps Q(phi_eps)^{-1}) and Z = 1{X > 0}. Severity:
//! a standardized bivariate pair (W1, W2) with cross-correlation rho_eta
//! in both the projected field and the nugget, mapped through the four
//! truth surfaces, so log BA = mu1 + sigma1 W1 and log CNT = mu2 +
//! sigma2 W2 on occurrence cells. Counts are exp(log CNT) rounded and
//! clamped to at least 1 where fire occurred; the log-Gaussian count
//! shape the severity stage assumes is preserved up to rounding.
//!
//! Truth surfaces default to smooth low-frequency harmonics over the
//! grid. Missingness is injected by calendar month: within each month's
//! periods a configured share (never all of them) receives independent
//! per-cell, per-variable holes, which leaves every month with complete
//! periods to serve as cross-validation targets and gappy ones to donate
//! patterns. All draws come from counter-based substreams, so one seed
//! fixes the panel bit for bit.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gmrf::{assemble_precision, sample_gmrf, GmrfSolver};
use crate::mathx::sample_std_normal;
use crate::mesh::{assemble_fem, build_mesh, MeshConfig, Point2, TriMesh};
use crate::occurrence::{CovariatePanel, DesignMatrix};
use crate::panel::{ObservationPanel, PeriodLabel};
use crate::rngx::{RngLattice, DOMAIN_SIM};

/// Months with observations: March through September, as in the panel
/// the models are built for.
pub const SEASON_START: u32 = 3;
pub const SEASON_END: u32 = 9;

/// Period labels cycling March..September within each year.
pub fn season_labels(start_year: i32, t: usize) -> Vec<PeriodLabel> {
    let span = (SEASON_END - SEASON_START + 1) as usize;
    (0..t)
        .map(|k| PeriodLabel {
            year: start_year + (k / span) as i32,
            month: SEASON_START + (k % span) as u32,
        })
        .collect()
}

/// Per-cell hole rates inside gappy periods.
#[derive(Debug, Clone, Copy)]
pub struct MissingSpec {
    pub ba_rate: f64,
    pub cnt_rate: f64,
    /// Share of each calendar month's periods that receive holes; at
    /// least one period per month always stays complete.
    pub gappy_share: f64,
}

impl Default for MissingSpec {
    fn default() -> MissingSpec {
        MissingSpec { ba_rate: 0.2, cnt_rate: 0.2, gappy_share: 0.5 }
    }
}

/// Grid, truth parameters, and missingness of one simulated panel.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub nx: usize,
    pub ny: usize,
    /// Grid spacing in degree units.
    pub spacing: f64,
    pub t: usize,
    pub start_year: i32,
    pub phi_eps: f64,
    pub r_eps: f64,
    pub phi_eta: f64,
    pub r_eta: f64,
    pub rho_eta: f64,
    /// Occurrence trend: mu_z_base + mu_z_amp * harmonic(s).
    pub mu_z_base: f64,
    pub mu_z_amp: f64,
    /// Log-scale severity surfaces: mu = base + amp * harmonic(s),
    /// sigma = exp(base + amp * harmonic(s)).
    pub mu1_base: f64,
    pub mu1_amp: f64,
    pub log_sigma1_base: f64,
    pub log_sigma1_amp: f64,
    pub mu2_base: f64,
    pub mu2_amp: f64,
    pub log_sigma2_base: f64,
    pub log_sigma2_amp: f64,
    pub missing: MissingSpec,
    pub mesh: MeshConfig,
}

impl Default for SimConfig {
    fn default() -> SimConfig {
        SimConfig {
            nx: 20,
            ny: 20,
            spacing: 1.0,
            t: 20,
            start_year: 1993,
            phi_eps: 3.0,
            r_eps: 0.6,
            phi_eta: 3.0,
            r_eta: 0.5,
            rho_eta: 0.5,
            mu_z_base: 0.0,
            mu_z_amp: 1.0,
            mu1_base: 2.0,
            mu1_amp: 1.0,
            log_sigma1_base: -0.2,
            log_sigma1_amp: 0.3,
            mu2_base: 0.8,
            mu2_amp: 0.6,
            log_sigma2_base: -0.5,
            log_sigma2_amp: 0.3,
            missing: MissingSpec::default(),
            mesh: MeshConfig {
                extension_margin: 0.3,
                node_target_ratio: None,
                ..MeshConfig::default()
            },
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 || self.t == 0 {
            return Err(Error::Config(format!(
                "grid {}x{} with {} periods is too small to simulate",
                self.nx, self.ny, self.t
            )));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::Config("grid spacing must be positive".into()));
        }
        for (name, v) in [("phi_eps", self.phi_eps), ("phi_eta", self.phi_eta)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} {v} must be positive")));
            }
        }
        for (name, v) in [("r_eps", self.r_eps), ("r_eta", self.r_eta)] {
            if !(0.0 < v && v < 1.0) {
                return Err(Error::Config(format!("{name} {v} must lie in (0, 1)")));
            }
        }
        if !(-1.0 < self.rho_eta && self.rho_eta < 1.0) {
            return Err(Error::Config(format!(
                "rho_eta {} must lie in (-1, 1)",
                self.rho_eta
            )));
        }
        for (name, v) in [
            ("ba_rate", self.missing.ba_rate),
            ("cnt_rate", self.missing.cnt_rate),
            ("gappy_share", self.missing.gappy_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Row-major pixel centers, spacing-scaled.
    pub fn locations(&self) -> Vec<Point2> {
        let mut pts = Vec::with_capacity(self.nx * self.ny);
        for j in 0..self.ny {
            for i in 0..self.nx {
                pts.push(Point2::new(i as f64 * self.spacing, j as f64 * self.spacing));
            }
        }
        pts
    }
}

/// Everything the generator knew: scalar truths, the per-pixel surfaces,
/// and the per-cell latent fields (period-major).
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub phi_eps: f64,
    pub r_eps: f64,
    pub phi_eta: f64,
    pub r_eta: f64,
    pub rho_eta: f64,
    pub mu_z: Vec<f64>,
    pub mu1: Vec<f64>,
    pub sigma1: Vec<f64>,
    pub mu2: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// Latent occurrence reals X_t(s_i) at `t * n + i`.
    pub x: Vec<f64>,
    /// Standardized severity pair, defined at every cell.
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

/// Normalized coordinates in [0, 1]^2 over the grid bounding box.
fn unit_coords(p: &Point2, lo: &Point2, hi: &Point2) -> (f64, f64) {
    let u = if hi.lon > lo.lon { (p.lon - lo.lon) / (hi.lon - lo.lon) } else { 0.5 };
    let v = if hi.lat > lo.lat { (p.lat - lo.lat) / (hi.lat - lo.lat) } else { 0.5 };
    (u, v)
}

fn bbox(points: &[Point2]) -> (Point2, Point2) {
    let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo.lon = lo.lon.min(p.lon);
        lo.lat = lo.lat.min(p.lat);
        hi.lon = hi.lon.max(p.lon);
        hi.lat = hi.lat.max(p.lat);
    }
    (lo, hi)
}

/// The low-frequency harmonics behind each truth surface. Distinct shapes
/// keep the surfaces from being collinear, so the smoother and the
/// regression benchmarks see genuinely different fields.
fn harmonic(kind: usize, u: f64, v: f64) -> f64 {
    use std::f64::consts::PI;
    match kind {
        0 => (2.0 * PI * u).sin() * (PI * v).cos(),
        1 => (PI * u).sin() * (PI * v).sin(),
        2 => (PI * u).cos(),
        3 => (PI * u).cos() * (PI * v).sin(),
        _ => (PI * v).sin(),
    }
}

fn surface(locations: &[Point2], kind: usize, base: f64, amp: f64) -> Vec<f64> {
    let (lo, hi) = bbox(locations);
    locations
        .iter()
        .map(|p| {
            let (u, v) = unit_coords(p, &lo, &hi);
            base + amp * harmonic(kind, u, v)
        })
        .collect()
}

/// Calendar months mapped to the period indices that get missingness:
/// within each month's periods, the trailing `gappy_share` rounded down,
/// capped so at least one period per month stays complete.
fn gappy_periods(labels: &[PeriodLabel], share: f64) -> Vec<bool> {
    let mut by_month: Vec<Vec<usize>> = vec![Vec::new(); 13];
    for (k, label) in labels.iter().enumerate() {
        by_month[label.month as usize].push(k);
    }
    let mut gappy = vec![false; labels.len()];
    for group in &by_month {
        if group.len() < 2 {
            continue;
        }
        let want = ((group.len() as f64 * share).round() as usize).min(group.len() - 1);
        for &k in group.iter().rev().take(want) {
            gappy[k] = true;
        }
    }
    gappy
}

/// Draw one panel and its truth record. The same seed yields the same
/// panel; per-period substreams make the draw order immaterial.
pub fn simulate(config: &SimConfig, lattice: RngLattice) -> Result<(ObservationPanel, SimTruth)> {
    config.validate()?;
    let locations = config.locations();
    let n = locations.len();
    let t = config.t;
    let labels = season_labels(config.start_year, t);

    let mesh = build_mesh(&locations, &config.mesh)?;
    let fem = assemble_fem(&mesh)?;
    let a = crate::mesh::project(&mesh, &locations)?;
    let solver = GmrfSolver::new(fem.pattern());
    let q_eps = assemble_precision(&fem, config.phi_eps)?;
    let f_eps = solver.factor(&q_eps)?;
    let q_eta = assemble_precision(&fem, config.phi_eta)?;
    let f_eta = solver.factor(&q_eta)?;

    let mu_z = surface(&locations, 0, config.mu_z_base, config.mu_z_amp);
    let mu1 = surface(&locations, 1, config.mu1_base, config.mu1_amp);
    let sigma1: Vec<f64> = surface(&locations, 2, config.log_sigma1_base, config.log_sigma1_amp)
        .into_iter()
        .map(f64::exp)
        .collect();
    let mu2 = surface(&locations, 3, config.mu2_base, config.mu2_amp);
    let sigma2: Vec<f64> = surface(&locations, 4, config.log_sigma2_base, config.log_sigma2_amp)
        .into_iter()
        .map(f64::exp)
        .collect();

    let project_field = |field: &[f64]| -> Vec<f64> {
        (0..n).map(|i| a.row_dot(i, field)).collect()
    };

    let mut x = vec![0.0; n * t];
    let mut w1 = vec![0.0; n * t];
    let mut w2 = vec![0.0; n * t];
    let mut ba = vec![None; n * t];
    let mut cnt = vec![None; n * t];
    let rho = config.rho_eta;
    let cross = (1.0 - rho * rho).sqrt();
    for tt in 0..t {
        // Occurrence layer.
        let mut rx = lattice.stream(DOMAIN_SIM, tt as u64, 0);
        let mut eps = sample_gmrf(&f_eps, &mut rx);
        for e in &mut eps {
            *e *= config.r_eps.sqrt();
        }
        let aeps = project_field(&eps);
        let nug_x = (1.0 - config.r_eps).sqrt();
        for i in 0..n {
            x[tt * n + i] = mu_z[i] + aeps[i] + nug_x * sample_std_normal(&mut rx);
        }

        // Severity layer: component 2's field and nugget shocks are
        // rho-correlated with component 1's, matching the separable
        // cross-covariance the severity sampler assumes.
        let mut rw = lattice.stream(DOMAIN_SIM, tt as u64, 1);
        let eta1 = sample_gmrf(&f_eta, &mut rw);
        let eta_perp = sample_gmrf(&f_eta, &mut rw);
        let nstar = eta1.len();
        let mut eta2 = vec![0.0; nstar];
        for j in 0..nstar {
            eta2[j] = rho * eta1[j] + cross * eta_perp[j];
        }
        let scale = config.r_eta.sqrt();
        let field1: Vec<f64> = project_field(&eta1).iter().map(|v| scale * v).collect();
        let field2: Vec<f64> = project_field(&eta2).iter().map(|v| scale * v).collect();
        let nug_w = (1.0 - config.r_eta).sqrt();
        for i in 0..n {
            let z1 = sample_std_normal(&mut rw);
            let z2 = sample_std_normal(&mut rw);
            w1[tt * n + i] = field1[i] + nug_w * z1;
            w2[tt * n + i] = field2[i] + nug_w * (rho * z1 + cross * z2);
        }

        for i in 0..n {
            let cell = tt * n + i;
            if x[cell] > 0.0 {
                let log_ba = mu1[i] + sigma1[i] * w1[cell];
                let log_cnt = mu2[i] + sigma2[i] * w2[cell];
                ba[cell] = Some(log_ba.exp());
                cnt[cell] = Some((log_cnt.exp().round() as u32).max(1));
            } else {
                ba[cell] = Some(0.0);
                cnt[cell] = Some(0);
            }
        }
    }

    // Missingness: independent holes per variable inside gappy periods.
    let gappy = gappy_periods(&labels, config.missing.gappy_share);
    for tt in 0..t {
        if !gappy[tt] {
            continue;
        }
        let mut rm = lattice.stream(DOMAIN_SIM, tt as u64, 2);
        for i in 0..n {
            if rm.gen::<f64>() < config.missing.ba_rate {
                ba[tt * n + i] = None;
            }
            if rm.gen::<f64>() < config.missing.cnt_rate {
                cnt[tt * n + i] = None;
            }
        }
    }

    let panel = ObservationPanel::new(locations, labels, ba, cnt)?;
    let truth = SimTruth {
        phi_eps: config.phi_eps,
        r_eps: config.r_eps,
        phi_eta: config.phi_eta,
        r_eta: config.r_eta,
        rho_eta: config.rho_eta,
        mu_z,
        mu1,
        sigma1,
        mu2,
        sigma2,
        x,
        w1,
        w2,
    };
    Ok((panel, truth))
}

/// The six-column trend design over synthetic terrain: altitude and its
/// SD are smooth functions of position, the mainland share tapers at the
/// domain edge. Stands in for the real static pixel covariates.
pub fn synthetic_design(locations: &[Point2]) -> Result<DesignMatrix> {
    let (lo, hi) = bbox(locations);
    let n = locations.len();
    let mut alt_mean = Vec::with_capacity(n);
    let mut alt_sd = Vec::with_capacity(n);
    let mut mainland = Vec::with_capacity(n);
    for p in locations {
        let (u, v) = unit_coords(p, &lo, &hi);
        alt_mean.push(1.2 + 0.8 * harmonic(1, u, v) + 0.3 * harmonic(2, u, v));
        alt_sd.push(0.4 + 0.25 * harmonic(4, u, v));
        let edge = (4.0 * u.min(1.0 - u).min(v).min(1.0 - v)).min(1.0);
        mainland.push(edge);
    }
    DesignMatrix::standard(locations, &alt_mean, &alt_sd, &mainland)
}

/// Per-cell synthetic covariates: the non-intercept design columns plus
/// seasonal harmonics and a scaled year index, the spatiotemporal feature
/// block the forest and the covariate model variants consume.
pub fn synthetic_covariates(
    locations: &[Point2],
    periods: &[PeriodLabel],
) -> Result<CovariatePanel> {
    let design = synthetic_design(locations)?;
    let n = locations.len();
    let t = periods.len();
    let l = 5 + 3;
    let year0 = periods.iter().map(|p| p.year).min().unwrap_or(0);
    let mut values = Vec::with_capacity(n * t * l);
    for label in periods {
        let phase = 2.0 * std::f64::consts::PI * f64::from(label.month) / 12.0;
        for i in 0..n {
            values.extend_from_slice(&design.row(i)[1..6]);
            values.push(phase.sin());
            values.push(phase.cos());
            values.push(f64::from(label.year - year0) / 10.0);
        }
    }
    CovariatePanel::new(n, t, l, values)
}

/// Mesh shared by every stage of a run over this panel.
pub fn panel_mesh(panel: &ObservationPanel, config: &MeshConfig) -> Result<TriMesh> {
    build_mesh(panel.locations(), config)
}
