//! Per-pixel moment estimation and low-rank spatial smoothing of the
//! four marginal parameter surfaces.
//!
//! The positive observations of each variable are log-transformed and
//! summarized per pixel by their empirical mean and standard deviation.
//! Each of the four noisy fields (two means, two log standard
//! deviations) is then smoothed by a linear mixed model
//!
//! ```text
//! field(s) = b0 + b1 lon + b2 lat + sum_rk w_rk h_rk(s) + xi + e
//! ```
//!
//! with Gaussian kernels `h_rk` on three nested center grids and one
//! random-effect variance per resolution. Variance components are
//! fitted by EM on the marginal likelihood; the kernel weights are the
//! posterior mean given the fitted components. The log-likelihood is
//! asserted non-decreasing at every step.
//!
//! The fine-scale term `xi` and the measurement error `e` are not
//! separately identifiable from one field realization, so the fit
//! estimates their sum and splits it by a caller-chosen share
//! (default zero, everything measurement error).
//!
//! Standard-deviation surfaces are smoothed on the log scale and
//! exponentiated, keeping them strictly positive everywhere.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mesh::Point2;
use crate::panel::{ObservationPanel, Variable};

/// Default kernel center-grid sides, coarse to fine.
pub const DEFAULT_BASIS_GRIDS: [usize; 3] = [5, 9, 17];

/// Minimum observed pixels required to fit one field.
const MIN_OBSERVED: usize = 10;

/// Per-pixel log-scale moments of one variable's positive values.
#[derive(Debug, Clone)]
pub struct VariableMoments {
    pub mean: Vec<Option<f64>>,
    /// Sample standard deviation; missing with fewer than two positives.
    pub sd: Vec<Option<f64>>,
    pub positive_count: Vec<usize>,
}

/// Moments for both variables.
#[derive(Debug, Clone)]
pub struct EmpiricalMoments {
    pub ba: VariableMoments,
    pub cnt: VariableMoments,
}

/// Mean and SD of the natural log of strictly positive values, per
/// pixel. Zeros and missing cells are excluded; the SD needs at least
/// two positives, the mean at least one.
pub fn empirical_moments(panel: &ObservationPanel) -> EmpiricalMoments {
    let one = |value: &dyn Fn(usize, usize) -> Option<f64>| {
        let mut mean = vec![None; panel.n()];
        let mut sd = vec![None; panel.n()];
        let mut count = vec![0usize; panel.n()];
        for i in 0..panel.n() {
            let logs: Vec<f64> = (0..panel.t())
                .filter_map(|t| value(i, t))
                .filter(|&v| v > 0.0)
                .map(f64::ln)
                .collect();
            count[i] = logs.len();
            if logs.is_empty() {
                continue;
            }
            let m = logs.iter().sum::<f64>() / logs.len() as f64;
            mean[i] = Some(m);
            if logs.len() > 1 {
                let ss: f64 = logs.iter().map(|v| (v - m) * (v - m)).sum();
                sd[i] = Some((ss / (logs.len() - 1) as f64).sqrt());
            }
        }
        VariableMoments {
            mean,
            sd,
            positive_count: count,
        }
    };
    EmpiricalMoments {
        ba: one(&|i, t| panel.ba(i, t)),
        cnt: one(&|i, t| panel.cnt(i, t).map(f64::from)),
    }
}

struct Resolution {
    centers: Vec<Point2>,
    bandwidth: f64,
}

/// Gaussian kernels on nested regular center grids. Kernel value at
/// its own center is 1; bandwidth is 1.5 times the center spacing of
/// its resolution.
pub struct BasisSet {
    resolutions: Vec<Resolution>,
}

impl BasisSet {
    /// Center grids are `sides[r] x sides[r]` over the bounding box of
    /// the locations, inclusive of the corners.
    pub fn new(locations: &[Point2], sides: &[usize]) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::Parameter("no locations for basis".into()));
        }
        for w in sides.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Parameter(format!(
                    "basis grids must be strictly increasing, got {sides:?}"
                )));
            }
        }
        let (mut lo, mut hi) = (locations[0], locations[0]);
        for p in locations {
            lo.lon = lo.lon.min(p.lon);
            lo.lat = lo.lat.min(p.lat);
            hi.lon = hi.lon.max(p.lon);
            hi.lat = hi.lat.max(p.lat);
        }
        let mut resolutions = Vec::new();
        for &side in sides {
            if side < 2 {
                return Err(Error::Parameter("basis grid side must be >= 2".into()));
            }
            let step = side as f64 - 1.0;
            let (dx, dy) = ((hi.lon - lo.lon) / step, (hi.lat - lo.lat) / step);
            let spacing = dx.max(dy).max(1e-12);
            let mut centers = Vec::with_capacity(side * side);
            for j in 0..side {
                for i in 0..side {
                    centers.push(Point2::new(
                        lo.lon + dx * i as f64,
                        lo.lat + dy * j as f64,
                    ));
                }
            }
            resolutions.push(Resolution {
                centers,
                bandwidth: 1.5 * spacing,
            });
        }
        Ok(Self { resolutions })
    }

    pub fn default_for(locations: &[Point2]) -> Result<Self> {
        Self::new(locations, &DEFAULT_BASIS_GRIDS)
    }

    pub fn k_total(&self) -> usize {
        self.resolutions.iter().map(|r| r.centers.len()).sum()
    }

    /// Half-open kernel index range of each resolution.
    pub fn ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for r in &self.resolutions {
            out.push(start..start + r.centers.len());
            start += r.centers.len();
        }
        out
    }

    /// All kernel values at one location, resolutions concatenated.
    pub fn evaluate(&self, p: &Point2) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k_total());
        for r in &self.resolutions {
            let denom = 2.0 * r.bandwidth * r.bandwidth;
            for c in &r.centers {
                let d2 = (p.lon - c.lon) * (p.lon - c.lon) + (p.lat - c.lat) * (p.lat - c.lat);
                out.push((-d2 / denom).exp());
            }
        }
        out
    }
}

/// Fitted smoother for one field.
#[derive(Debug, Clone)]
pub struct SmootherModel {
    /// Trend coefficients for 1, lon, lat.
    pub beta: [f64; 3],
    /// Posterior mean kernel weights, resolutions concatenated.
    pub weights: Vec<f64>,
    /// One random-effect variance per resolution.
    pub variances: Vec<f64>,
    pub sigma2_xi: f64,
    pub sigma2_e: f64,
    /// Set when the input field was constant and the fit collapsed to
    /// the trend.
    pub trend_only: bool,
    /// Fine-scale conditional means keyed by data-pixel coordinates;
    /// empty when the fine-scale share is zero.
    xi_hat: HashMap<(u64, u64), f64>,
}

fn coord_key(p: &Point2) -> (u64, u64) {
    (p.lon.to_bits(), p.lat.to_bits())
}

struct Observed {
    points: Vec<Point2>,
    y: Vec<f64>,
    /// m x 3 trend design.
    x: Vec<[f64; 3]>,
    /// m x k kernel design, row-major.
    h: Vec<f64>,
    k: usize,
}

fn gather(values: &[Option<f64>], locations: &[Point2], basis: &BasisSet) -> Result<Observed> {
    if values.len() != locations.len() {
        return Err(Error::Dimension(format!(
            "{} field values against {} locations",
            values.len(),
            locations.len()
        )));
    }
    let mut points = Vec::new();
    let mut y = Vec::new();
    for (v, p) in values.iter().zip(locations) {
        if let Some(val) = v {
            if !val.is_finite() {
                return Err(Error::DataIntegrity(format!(
                    "non-finite field value {val} at ({}, {})",
                    p.lon, p.lat
                )));
            }
            points.push(*p);
            y.push(*val);
        }
    }
    if y.len() < MIN_OBSERVED {
        return Err(Error::Parameter(format!(
            "only {} observed pixels; need at least {MIN_OBSERVED}",
            y.len()
        )));
    }
    let k = basis.k_total();
    let mut h = Vec::with_capacity(points.len() * k);
    let mut x = Vec::with_capacity(points.len());
    for p in &points {
        x.push([1.0, p.lon, p.lat]);
        h.extend(basis.evaluate(p));
    }
    Ok(Observed { points, y, x, h, k })
}

fn ols3(obs: &Observed, target: &[f64]) -> Result<[f64; 3]> {
    let mut xtx = DMatrix::<f64>::zeros(3, 3);
    let mut xty = DVector::<f64>::zeros(3);
    for (row, &yi) in obs.x.iter().zip(target) {
        for a in 0..3 {
            xty[a] += row[a] * yi;
            for b in 0..3 {
                xtx[(a, b)] += row[a] * row[b];
            }
        }
    }
    let chol = Cholesky::new(xtx)
        .ok_or_else(|| Error::Numerical("degenerate trend design (collinear coordinates)".into()))?;
    let b = chol.solve(&xty);
    Ok([b[0], b[1], b[2]])
}

/// Posterior of the kernel weights at fixed components; returns
/// (mean, covariance, log det of I + D^{1/2} G D^{1/2} / s2).
fn weight_posterior(
    obs: &Observed,
    g: &DMatrix<f64>,
    resid: &[f64],
    dsqrt: &[f64],
    sigma2: f64,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let k = obs.k;
    let mut s = DMatrix::<f64>::identity(k, k);
    for a in 0..k {
        for b in 0..k {
            s[(a, b)] += dsqrt[a] * g[(a, b)] * dsqrt[b] / sigma2;
        }
    }
    let chol =
        Cholesky::new(s).ok_or_else(|| Error::NotPositiveDefinite("kernel system".into()))?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    // u = H' resid
    let mut u = DVector::<f64>::zeros(k);
    for (row, &r) in resid.iter().enumerate() {
        let h_row = &obs.h[row * k..(row + 1) * k];
        for a in 0..k {
            u[a] += h_row[a] * r;
        }
    }
    let mut rhs = u.clone();
    for a in 0..k {
        rhs[a] *= dsqrt[a];
    }
    let inner = chol.solve(&rhs);
    let mut mean = inner;
    for a in 0..k {
        mean[a] *= dsqrt[a] / sigma2;
    }
    let mut cov = chol.inverse();
    for a in 0..k {
        for b in 0..k {
            cov[(a, b)] *= dsqrt[a] * dsqrt[b];
        }
    }
    Ok((mean, cov, logdet))
}

fn marginal_ll(
    obs: &Observed,
    resid: &[f64],
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    logdet: f64,
    sigma2: f64,
) -> f64 {
    // r' Sigma^-1 r = (r'r - u' omega_mean) / s2 with u = H'r, because
    // omega_mean = (D - D H' Sigma^-1 H D) H' r / s2 folds the Woodbury
    // correction; recompute u' mean directly from H mean.
    let m = obs.y.len();
    let k = obs.k;
    let rr: f64 = resid.iter().map(|r| r * r).sum();
    let mut u_dot = 0.0;
    for (row, &r) in resid.iter().enumerate() {
        let h_row = &obs.h[row * k..(row + 1) * k];
        let fit: f64 = h_row.iter().zip(mean.iter()).map(|(h, w)| h * w).sum();
        u_dot += r * fit;
    }
    let _ = cov;
    let quad = (rr - u_dot) / sigma2;
    -0.5 * (m as f64 * (sigma2.ln() + crate::mathx::LN_2PI) + logdet + quad)
}

/// Fit one field by EM. `xi_share` in [0, 1] splits the fitted nugget
/// between fine-scale signal and measurement error.
pub fn fit_smoother(
    values: &[Option<f64>],
    locations: &[Point2],
    basis: &BasisSet,
    xi_share: f64,
) -> Result<SmootherModel> {
    if !(0.0..=1.0).contains(&xi_share) {
        return Err(Error::Parameter(format!(
            "xi share {xi_share} outside [0, 1]"
        )));
    }
    let obs = gather(values, locations, basis)?;
    let m = obs.y.len();
    let k = obs.k;
    let mean_y = obs.y.iter().sum::<f64>() / m as f64;
    let var_y = obs.y.iter().map(|v| (v - mean_y) * (v - mean_y)).sum::<f64>() / m as f64;
    if var_y <= 1e-24 * (1.0 + mean_y * mean_y) {
        log::warn!("constant field; smoother collapses to the trend");
        return Ok(SmootherModel {
            beta: ols3(&obs, &obs.y)?,
            weights: vec![0.0; k],
            variances: vec![0.0; basis.resolutions.len()],
            sigma2_xi: 0.0,
            sigma2_e: 0.0,
            trend_only: true,
            xi_hat: HashMap::new(),
        });
    }

    // G = H'H, reused every iteration.
    let mut g = DMatrix::<f64>::zeros(k, k);
    for row in 0..m {
        let h_row = &obs.h[row * k..(row + 1) * k];
        for a in 0..k {
            for b in a..k {
                g[(a, b)] += h_row[a] * h_row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }

    let ranges = basis.ranges();
    let mut beta = ols3(&obs, &obs.y)?;
    let mut sigma2 = (var_y * 0.5).max(1e-12);
    let mut variances = vec![var_y * 0.5 / ranges.len() as f64; ranges.len()];
    let mut last_ll = f64::NEG_INFINITY;
    let mut mean = DVector::<f64>::zeros(k);
    for _ in 0..500 {
        let dsqrt: Vec<f64> = ranges
            .iter()
            .enumerate()
            .flat_map(|(r, range)| std::iter::repeat(variances[r].sqrt()).take(range.len()))
            .collect();
        let resid: Vec<f64> = obs
            .y
            .iter()
            .zip(&obs.x)
            .map(|(&yi, x)| yi - beta[0] * x[0] - beta[1] * x[1] - beta[2] * x[2])
            .collect();
        let (mu, cov, logdet) = weight_posterior(&obs, &g, &resid, &dsqrt, sigma2)?;
        let ll = marginal_ll(&obs, &resid, &mu, &cov, logdet, sigma2);
        assert!(
            ll >= last_ll - 1e-8 * (1.0 + last_ll.abs()),
            "EM log-likelihood decreased: {last_ll} -> {ll}"
        );
        let done = (ll - last_ll).abs() <= 1e-8 * (1.0 + ll.abs());
        last_ll = ll;
        mean = mu;

        // M-step: trend from the kernel-adjusted field, one variance
        // per resolution from the posterior second moment, nugget from
        // the residual plus tr(Cov * G).
        let adjusted: Vec<f64> = (0..m)
            .map(|row| {
                let h_row = &obs.h[row * k..(row + 1) * k];
                obs.y[row] - h_row.iter().zip(mean.iter()).map(|(h, w)| h * w).sum::<f64>()
            })
            .collect();
        beta = ols3(&obs, &adjusted)?;
        for (r, range) in ranges.iter().enumerate() {
            let mut acc = 0.0;
            for a in range.clone() {
                acc += mean[a] * mean[a] + cov[(a, a)];
            }
            variances[r] = acc / range.len() as f64;
        }
        let mut ssr = 0.0;
        for row in 0..m {
            let x = &obs.x[row];
            let r = adjusted[row] - beta[0] * x[0] - beta[1] * x[1] - beta[2] * x[2];
            ssr += r * r;
        }
        let mut trace = 0.0;
        for a in 0..k {
            for b in 0..k {
                trace += cov[(a, b)] * g[(a, b)];
            }
        }
        sigma2 = ((ssr + trace) / m as f64).max(1e-30);
        if done {
            break;
        }
    }

    let nugget = sigma2;
    let sigma2_xi = xi_share * nugget;
    let sigma2_e = nugget - sigma2_xi;
    let mut xi_hat = HashMap::new();
    if sigma2_xi > 0.0 {
        for (row, p) in obs.points.iter().enumerate() {
            let h_row = &obs.h[row * k..(row + 1) * k];
            let x = &obs.x[row];
            let fit = beta[0] * x[0]
                + beta[1] * x[1]
                + beta[2] * x[2]
                + h_row.iter().zip(mean.iter()).map(|(h, w)| h * w).sum::<f64>();
            xi_hat.insert(coord_key(p), xi_share * (obs.y[row] - fit));
        }
    }
    Ok(SmootherModel {
        beta,
        weights: mean.iter().copied().collect(),
        variances,
        sigma2_xi,
        sigma2_e,
        trend_only: false,
        xi_hat,
    })
}

/// Conditional-mean fit at fixed variance components: one joint solve
/// of the mixed-model equations, linear in the data. Kernels of a
/// zero-variance resolution are pinned at weight zero.
pub fn fit_frozen(
    values: &[Option<f64>],
    locations: &[Point2],
    basis: &BasisSet,
    variances: &[f64],
    sigma2: f64,
    xi_share: f64,
) -> Result<SmootherModel> {
    if sigma2 <= 0.0 {
        return Err(Error::Parameter(format!("nugget {sigma2} must be positive")));
    }
    let ranges = basis.ranges();
    if variances.len() != ranges.len() {
        return Err(Error::Dimension(format!(
            "{} variances for {} resolutions",
            variances.len(),
            ranges.len()
        )));
    }
    let obs = gather(values, locations, basis)?;
    let k = obs.k;
    let active: Vec<usize> = ranges
        .iter()
        .enumerate()
        .filter(|(r, _)| variances[*r] > 0.0)
        .flat_map(|(_, range)| range.clone())
        .collect();
    let prior: Vec<f64> = ranges
        .iter()
        .enumerate()
        .flat_map(|(r, range)| std::iter::repeat(variances[r]).take(range.len()))
        .collect();
    let na = active.len();
    let dim = 3 + na;
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);
    for row in 0..obs.y.len() {
        let x = &obs.x[row];
        let h_row = &obs.h[row * k..(row + 1) * k];
        let mut full = Vec::with_capacity(dim);
        full.extend_from_slice(x);
        full.extend(active.iter().map(|&j| h_row[j]));
        for p in 0..dim {
            b[p] += full[p] * obs.y[row] / sigma2;
            for q in p..dim {
                a[(p, q)] += full[p] * full[q] / sigma2;
            }
        }
    }
    for (idx, &j) in active.iter().enumerate() {
        a[(3 + idx, 3 + idx)] += 1.0 / prior[j];
    }
    for p in 0..dim {
        for q in 0..p {
            a[(p, q)] = a[(q, p)];
        }
    }
    let sol = Cholesky::new(a)
        .ok_or_else(|| Error::NotPositiveDefinite("mixed-model equations".into()))?
        .solve(&b);
    let beta = [sol[0], sol[1], sol[2]];
    let mut weights = vec![0.0; k];
    for (idx, &j) in active.iter().enumerate() {
        weights[j] = sol[3 + idx];
    }
    let sigma2_xi = xi_share * sigma2;
    let mut xi_hat = HashMap::new();
    if sigma2_xi > 0.0 {
        for (row, p) in obs.points.iter().enumerate() {
            let h_row = &obs.h[row * k..(row + 1) * k];
            let x = &obs.x[row];
            let fit = beta[0] * x[0]
                + beta[1] * x[1]
                + beta[2] * x[2]
                + h_row.iter().zip(&weights).map(|(h, w)| h * w).sum::<f64>();
            xi_hat.insert(coord_key(p), xi_share * (obs.y[row] - fit));
        }
    }
    Ok(SmootherModel {
        beta,
        weights,
        variances: variances.to_vec(),
        sigma2_xi,
        sigma2_e: sigma2 - sigma2_xi,
        trend_only: false,
        xi_hat,
    })
}

/// Plug-in conditional mean at each location. The fine-scale part
/// contributes only at data pixels (matched by exact coordinates) and
/// only when the fine-scale share was positive.
pub fn predict_surface(
    model: &SmootherModel,
    basis: &BasisSet,
    locations: &[Point2],
) -> Vec<f64> {
    locations
        .iter()
        .map(|p| {
            let mut v = model.beta[0] + model.beta[1] * p.lon + model.beta[2] * p.lat;
            if !model.trend_only {
                let h = basis.evaluate(p);
                v += h.iter().zip(&model.weights).map(|(a, b)| a * b).sum::<f64>();
            }
            if let Some(xi) = model.xi_hat.get(&coord_key(p)) {
                v += xi;
            }
            v
        })
        .collect()
}

/// The four smoothed marginal surfaces evaluated at every pixel.
#[derive(Debug, Clone)]
pub struct Surfaces {
    pub mu1: Vec<f64>,
    pub sigma1: Vec<f64>,
    pub mu2: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl Surfaces {
    pub fn validate(&self, n: usize) -> Result<()> {
        for (name, field) in [
            ("mu1", &self.mu1),
            ("sigma1", &self.sigma1),
            ("mu2", &self.mu2),
            ("sigma2", &self.sigma2),
        ] {
            if field.len() != n {
                return Err(Error::Dimension(format!(
                    "surface {name} has {} pixels, panel has {n}",
                    field.len()
                )));
            }
            if !field.iter().all(|v| v.is_finite()) {
                return Err(Error::DataIntegrity(format!("surface {name} has non-finite values")));
            }
        }
        for (name, field) in [("sigma1", &self.sigma1), ("sigma2", &self.sigma2)] {
            if field.iter().any(|&v| v <= 0.0) {
                return Err(Error::Parameter(format!("surface {name} must be strictly positive")));
            }
        }
        Ok(())
    }

    pub fn mu(&self, variable: Variable) -> &[f64] {
        match variable {
            Variable::Ba => &self.mu1,
            Variable::Cnt => &self.mu2,
        }
    }

    pub fn sigma(&self, variable: Variable) -> &[f64] {
        match variable {
            Variable::Ba => &self.sigma1,
            Variable::Cnt => &self.sigma2,
        }
    }
}

/// Fit all four surfaces from a zero-propagated panel. SD fields are
/// smoothed as log SD; pixels whose SD is zero carry no information
/// about the log scale and are treated as missing.
pub fn smooth_surfaces(
    panel: &ObservationPanel,
    basis: &BasisSet,
    xi_share: f64,
) -> Result<Surfaces> {
    let moments = empirical_moments(panel);
    let locations = panel.locations();
    let fit_field = |values: &[Option<f64>]| -> Result<Vec<f64>> {
        let model = fit_smoother(values, locations, basis, xi_share)?;
        Ok(predict_surface(&model, basis, locations))
    };
    let log_sd = |m: &VariableMoments| -> Vec<Option<f64>> {
        m.sd.iter()
            .map(|v| v.filter(|&s| s > 0.0).map(f64::ln))
            .collect()
    };
    let mu1 = fit_field(&moments.ba.mean)?;
    let sigma1 = fit_field(&log_sd(&moments.ba))?
        .into_iter()
        .map(f64::exp)
        .collect();
    let mu2 = fit_field(&moments.cnt.mean)?;
    let sigma2 = fit_field(&log_sd(&moments.cnt))?
        .into_iter()
        .map(f64::exp)
        .collect();
    let out = Surfaces {
        mu1,
        sigma1,
        mu2,
        sigma2,
    };
    out.validate(panel.n())?;
    Ok(out)
}

/// Standardized log-positive values; missing wherever the original
/// cell is missing or zero.
#[derive(Debug, Clone)]
pub struct StandardizedPanel {
    n: usize,
    t: usize,
    w1: Vec<Option<f64>>,
    w2: Vec<Option<f64>>,
}

impl StandardizedPanel {
    /// Build directly from period-major component vectors
    /// (index = period * n + pixel; component 1 is log-size, 2 is log-count).
    pub fn new(
        n: usize,
        t: usize,
        w1: Vec<Option<f64>>,
        w2: Vec<Option<f64>>,
    ) -> Result<StandardizedPanel> {
        if w1.len() != n * t || w2.len() != n * t {
            return Err(Error::Dimension(format!(
                "standardized panel components have {} and {} cells, expected {}",
                w1.len(),
                w2.len(),
                n * t
            )));
        }
        if w1.iter().chain(&w2).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Parameter(
                "standardized panel has non-finite entries".into(),
            ));
        }
        Ok(StandardizedPanel { n, t, w1, w2 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn get(&self, pixel: usize, period: usize, variable: Variable) -> Option<f64> {
        match variable {
            Variable::Ba => self.w1[period * self.n + pixel],
            Variable::Cnt => self.w2[period * self.n + pixel],
        }
    }
}

/// W = (log value - mu) / sigma at strictly positive observed cells.
pub fn standardize(panel: &ObservationPanel, surfaces: &Surfaces) -> Result<StandardizedPanel> {
    surfaces.validate(panel.n())?;
    let mut w1 = Vec::with_capacity(panel.n() * panel.t());
    let mut w2 = Vec::with_capacity(panel.n() * panel.t());
    for t in 0..panel.t() {
        for i in 0..panel.n() {
            w1.push(
                panel
                    .ba(i, t)
                    .filter(|&b| b > 0.0)
                    .map(|b| (b.ln() - surfaces.mu1[i]) / surfaces.sigma1[i]),
            );
            w2.push(
                panel
                    .cnt(i, t)
                    .filter(|&c| c > 0)
                    .map(|c| (f64::from(c).ln() - surfaces.mu2[i]) / surfaces.sigma2[i]),
            );
        }
    }
    Ok(StandardizedPanel {
        n: panel.n(),
        t: panel.t(),
        w1,
        w2,
    })
}

/// Inverse of `standardize` on the log scale: mu + sigma * w.
pub fn destandardize(w: f64, pixel: usize, variable: Variable, surfaces: &Surfaces) -> f64 {
    surfaces.mu(variable)[pixel] + surfaces.sigma(variable)[pixel] * w
}
