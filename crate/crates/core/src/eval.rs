//! Severity thresholds, challenge scoring, cross-validation masks, and
//! the two benchmark regressions.
//!
//! The score of a forecast is the weighted sum of squared differences
//! between the predictive distribution function and the empirical step
//! function of each held-out value, evaluated on a fixed 28-point
//! severity grid per variable. Weights grow with severity and are
//! rescaled to sum to one per grid, so a constant forecast of 1/2
//! against an observation above every threshold scores exactly 1/4.
//!
//! Cross-validation masks replicate the spatial missingness pattern of
//! an incomplete donor period onto a fully observed target period,
//! either restricted to donors of the same calendar month or drawn from
//! any month. Every masked cell is observed in the input panel, so the
//! hidden truth is available for scoring.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mathx::{lognormal_cdf, poisson_cdf};
use crate::panel::{ObservationPanel, Variable};

/// Count severity grid: 0..10 by 1, 12..30 by 2, 40..100 by 10.
pub fn cnt_thresholds() -> Vec<f64> {
    let mut u: Vec<f64> = (0..=10).map(f64::from).collect();
    u.extend((6..=15).map(|k| f64::from(2 * k)));
    u.extend((4..=10).map(|k| f64::from(10 * k)));
    u
}

/// Burnt-area severity grid: 0, 1, 10..100 by 10, 150..300 by 50,
/// 400, 500, 1000..2000 by 500, then 5000 to 100000.
pub fn ba_thresholds() -> Vec<f64> {
    let mut u = vec![0.0, 1.0];
    u.extend((1..=10).map(|k| f64::from(100 * k) / 10.0));
    u.extend([150.0, 200.0, 250.0, 300.0, 400.0, 500.0]);
    u.extend([1000.0, 1500.0, 2000.0]);
    u.extend([
        5000.0, 10000.0, 20000.0, 30000.0, 40000.0, 50000.0, 100000.0,
    ]);
    u
}

pub fn thresholds_for(variable: Variable) -> Vec<f64> {
    match variable {
        Variable::Ba => ba_thresholds(),
        Variable::Cnt => cnt_thresholds(),
    }
}

/// Severity weights on one threshold grid.
#[derive(Debug, Clone)]
pub struct WeightVector {
    pub raw: Vec<f64>,
    /// Raw weights rescaled to sum to one.
    pub rescaled: Vec<f64>,
}

/// w(u) = 1 - (1 + (u+1)^2/1000)^(-1/4), rescaled per grid.
pub fn weight_vector(thresholds: &[f64]) -> Result<WeightVector> {
    if thresholds.is_empty() {
        return Err(Error::Parameter("empty threshold grid".into()));
    }
    let raw: Vec<f64> = thresholds
        .iter()
        .map(|&u| 1.0 - (1.0 + (u + 1.0) * (u + 1.0) / 1000.0).powf(-0.25))
        .collect();
    let total: f64 = raw.iter().sum();
    let rescaled = raw.iter().map(|w| w / total).collect();
    Ok(WeightVector { raw, rescaled })
}

/// Predictive distribution function of one held-out cell, evaluated on
/// a severity grid.
#[derive(Debug, Clone)]
pub struct PredictiveCdf {
    pub pixel: usize,
    pub period: usize,
    pub values: Vec<f64>,
}

fn validate_cdf_row(values: &[f64], m: usize) -> Result<()> {
    if values.len() != m {
        return Err(Error::Dimension(format!(
            "cdf row has {} entries, grid has {m}",
            values.len()
        )));
    }
    let mut prev = 0.0;
    for (k, &v) in values.iter().enumerate() {
        if !((-1e-12)..=1.0 + 1e-12).contains(&v) {
            return Err(Error::DataIntegrity(format!(
                "cdf value {v} at grid index {k} outside [0, 1]"
            )));
        }
        if v < prev - 1e-12 {
            return Err(Error::DataIntegrity(format!(
                "cdf decreases at grid index {k}: {prev} -> {v}"
            )));
        }
        prev = v;
    }
    Ok(())
}

/// S = sum over cells and grid points of w(u) (1{y <= u} - F(u))^2.
/// Additive over cells; zero for a perfect forecast.
pub fn challenge_score(
    predicted: &[PredictiveCdf],
    observed: &[f64],
    thresholds: &[f64],
    weights: &WeightVector,
) -> Result<f64> {
    if predicted.len() != observed.len() {
        return Err(Error::Dimension(format!(
            "{} cdf rows against {} observations",
            predicted.len(),
            observed.len()
        )));
    }
    if weights.rescaled.len() != thresholds.len() {
        return Err(Error::Dimension(
            "weights and thresholds differ in length".into(),
        ));
    }
    let mut score = 0.0;
    for (row, &y) in predicted.iter().zip(observed) {
        validate_cdf_row(&row.values, thresholds.len())?;
        for ((&u, &w), &f) in thresholds
            .iter()
            .zip(&weights.rescaled)
            .zip(row.values.iter())
        {
            let step = if y <= u { 1.0 } else { 0.0 };
            score += w * (step - f) * (step - f);
        }
    }
    Ok(score)
}

/// Cross-validation masking scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvScheme {
    /// Donor patterns come from the same calendar month as the target.
    FixedMonth,
    /// Donor patterns come from any incomplete period.
    RandomMonth,
}

impl CvScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            CvScheme::FixedMonth => "fixed-month",
            CvScheme::RandomMonth => "random-month",
        }
    }
}

impl std::str::FromStr for CvScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-month" | "fixed" => Ok(CvScheme::FixedMonth),
            "random-month" | "random" => Ok(CvScheme::RandomMonth),
            other => Err(Error::Parameter(format!("unknown cv scheme {other:?}"))),
        }
    }
}

/// One cell hidden by a cross-validation mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MaskCell {
    pub pixel: usize,
    pub period: usize,
    pub variable: Variable,
}

/// A generated mask: donor-to-target period pairs plus the cell list.
#[derive(Debug, Clone)]
pub struct MaskPattern {
    pub scheme: CvScheme,
    /// (donor period, target period) assignments actually used.
    pub pairs: Vec<(usize, usize)>,
    pub cells: Vec<MaskCell>,
}

/// Copy per-period missingness patterns from `source` onto complete
/// periods of `panel`. Each incomplete source period donates its
/// pattern to at most one target; targets are complete periods of the
/// panel, drawn without replacement (same calendar month only under
/// the fixed-month scheme). Donors left without an eligible target are
/// skipped.
pub fn make_cv_mask(
    panel: &ObservationPanel,
    source: &ObservationPanel,
    scheme: CvScheme,
    rng: &mut ChaCha8Rng,
) -> Result<MaskPattern> {
    if panel.n() != source.n() {
        return Err(Error::Dimension(format!(
            "panel has {} pixels, source has {}",
            panel.n(),
            source.n()
        )));
    }
    let donors: Vec<usize> = (0..source.t())
        .filter(|&t| !source.period_complete(t))
        .collect();
    let mut targets: Vec<usize> = (0..panel.t()).filter(|&t| panel.period_complete(t)).collect();
    if donors.is_empty() {
        return Err(Error::Parameter(
            "source panel has no incomplete periods to copy patterns from".into(),
        ));
    }
    if targets.is_empty() {
        return Err(Error::Parameter(
            "panel has no complete periods to receive masks".into(),
        ));
    }
    targets.shuffle(rng);
    let mut used = vec![false; targets.len()];
    let mut pairs = Vec::new();
    for &d in &donors {
        let donor_month = source.periods()[d].month;
        let pick = targets.iter().enumerate().position(|(k, &g)| {
            !used[k]
                && match scheme {
                    CvScheme::FixedMonth => panel.periods()[g].month == donor_month,
                    CvScheme::RandomMonth => true,
                }
        });
        if let Some(k) = pick {
            used[k] = true;
            pairs.push((d, targets[k]));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Parameter(
            "no donor period could be paired with a complete target period".into(),
        ));
    }
    let mut cells = Vec::new();
    for &(d, g) in &pairs {
        for variable in [Variable::Ba, Variable::Cnt] {
            for i in source.period_missing(d, variable) {
                cells.push(MaskCell {
                    pixel: i,
                    period: g,
                    variable,
                });
            }
        }
    }
    Ok(MaskPattern {
        scheme,
        pairs,
        cells,
    })
}

/// Hide the masked cells. Every masked cell must be observed; masks are
/// built on complete periods so a miss indicates a corrupted mask.
pub fn apply_mask(panel: &ObservationPanel, mask: &MaskPattern) -> Result<ObservationPanel> {
    let mut out = panel.clone();
    for cell in &mask.cells {
        match cell.variable {
            Variable::Ba => {
                if panel.ba(cell.pixel, cell.period).is_none() {
                    return Err(Error::DataIntegrity(format!(
                        "mask hides already-missing ba at pixel {} period {}",
                        cell.pixel, cell.period
                    )));
                }
                out.set_ba(cell.pixel, cell.period, None);
            }
            Variable::Cnt => {
                if panel.cnt(cell.pixel, cell.period).is_none() {
                    return Err(Error::DataIntegrity(format!(
                        "mask hides already-missing cnt at pixel {} period {}",
                        cell.pixel, cell.period
                    )));
                }
                out.set_cnt(cell.pixel, cell.period, None);
            }
        }
    }
    Ok(out)
}

/// True values of one variable at the masked cells, in mask order.
pub fn mask_truth(panel: &ObservationPanel, mask: &MaskPattern, variable: Variable) -> Vec<f64> {
    mask.cells
        .iter()
        .filter(|c| c.variable == variable)
        .map(|c| match variable {
            Variable::Ba => panel.ba(c.pixel, c.period).expect("masked cell observed"),
            Variable::Cnt => f64::from(panel.cnt(c.pixel, c.period).expect("masked cell observed")),
        })
        .collect()
}

/// Dense per-cell feature rows, shared by the benchmarks and the
/// forest. Storage is period-major like the panel.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    n: usize,
    t: usize,
    k: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n: usize, t: usize, k: usize) -> Self {
        Self {
            n,
            t,
            k,
            values: vec![0.0; n * t * k],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn set_row(&mut self, pixel: usize, period: usize, row: &[f64]) {
        assert_eq!(row.len(), self.k);
        let start = (period * self.n + pixel) * self.k;
        self.values[start..start + self.k].copy_from_slice(row);
    }

    pub fn row(&self, pixel: usize, period: usize) -> &[f64] {
        debug_assert!(pixel < self.n && period < self.t);
        let start = (period * self.n + pixel) * self.k;
        &self.values[start..start + self.k]
    }
}

/// Ordinary least squares by normal equations. Returns coefficients
/// and the residual variance with denominator m - k.
pub fn ols_fit(rows: &[&[f64]], y: &[f64]) -> Result<(Vec<f64>, f64)> {
    let m = rows.len();
    if m == 0 || m != y.len() {
        return Err(Error::Dimension(format!(
            "{} design rows against {} responses",
            m,
            y.len()
        )));
    }
    let k = rows[0].len();
    if m <= k {
        return Err(Error::Parameter(format!(
            "{m} observations cannot identify {k} coefficients and a variance"
        )));
    }
    let mut xtx = nalgebra::DMatrix::<f64>::zeros(k, k);
    let mut xty = nalgebra::DVector::<f64>::zeros(k);
    for (row, &yi) in rows.iter().zip(y) {
        for a in 0..k {
            xty[a] += row[a] * yi;
            for b in a..k {
                xtx[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtx[(a, b)] = xtx[(b, a)];
        }
    }
    let chol = nalgebra::Cholesky::new(xtx)
        .ok_or_else(|| Error::Numerical("singular least-squares design".into()))?;
    let beta = chol.solve(&xty);
    let mut ssr = 0.0;
    for (row, &yi) in rows.iter().zip(y) {
        let fit: f64 = row.iter().zip(beta.iter()).map(|(x, b)| x * b).sum();
        ssr += (yi - fit) * (yi - fit);
    }
    Ok((beta.iter().copied().collect(), ssr / (m - k) as f64))
}

/// Poisson regression with log link fitted by iteratively reweighted
/// least squares.
pub fn poisson_irls(rows: &[&[f64]], y: &[f64]) -> Result<Vec<f64>> {
    let m = rows.len();
    if m == 0 || m != y.len() {
        return Err(Error::Dimension(format!(
            "{} design rows against {} responses",
            m,
            y.len()
        )));
    }
    let k = rows[0].len();
    let mean_y = y.iter().sum::<f64>() / m as f64;
    let mut beta = vec![0.0; k];
    beta[0] = (mean_y.max(1e-8)).ln();
    for _ in 0..100 {
        let mut xtwx = nalgebra::DMatrix::<f64>::zeros(k, k);
        let mut xtwz = nalgebra::DVector::<f64>::zeros(k);
        for (row, &yi) in rows.iter().zip(y) {
            let eta: f64 = row
                .iter()
                .zip(&beta)
                .map(|(x, b)| x * b)
                .sum::<f64>()
                .clamp(-30.0, 30.0);
            let mu = eta.exp();
            let z = eta + (yi - mu) / mu;
            for a in 0..k {
                xtwz[a] += mu * row[a] * z;
                for b in a..k {
                    xtwx[(a, b)] += mu * row[a] * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let chol = nalgebra::Cholesky::new(xtwx)
            .ok_or_else(|| Error::Numerical("singular Poisson regression design".into()))?;
        let next = chol.solve(&xtwz);
        let delta = beta
            .iter()
            .zip(next.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        beta = next.iter().copied().collect();
        if delta < 1e-12 {
            break;
        }
    }
    Ok(beta)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Poisson-regression benchmark for counts: a log-link GLM on the
/// features, with the fitted Poisson distribution as predictive CDF.
pub fn benchmark_cnt(
    panel: &ObservationPanel,
    features: &FeatureMatrix,
    targets: &[(usize, usize)],
) -> Result<Vec<PredictiveCdf>> {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for t in 0..panel.t() {
        for i in 0..panel.n() {
            if let Some(c) = panel.cnt(i, t) {
                rows.push(features.row(i, t));
                y.push(f64::from(c));
            }
        }
    }
    let beta = poisson_irls(&rows, &y)?;
    let grid = cnt_thresholds();
    targets
        .iter()
        .map(|&(i, t)| {
            let lambda = dot(features.row(i, t), &beta).clamp(-30.0, 30.0).exp();
            let values = grid.iter().map(|&u| poisson_cdf(u as u64, lambda)).collect();
            Ok(PredictiveCdf {
                pixel: i,
                period: t,
                values,
            })
        })
        .collect()
}

/// Log-Gaussian regression benchmark for burnt area. Counts are first
/// completed by a Poisson regression on the same features; the filled
/// count then joins the design for an ordinary least-squares fit of
/// log positive burnt area. The zero mass comes from each pixel's
/// empirical occurrence frequency, giving the mixture CDF
/// (1 - p) + p LN(u).
pub fn benchmark_ba(
    panel: &ObservationPanel,
    features: &FeatureMatrix,
    targets: &[(usize, usize)],
) -> Result<Vec<PredictiveCdf>> {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for t in 0..panel.t() {
        for i in 0..panel.n() {
            if let Some(c) = panel.cnt(i, t) {
                rows.push(features.row(i, t));
                y.push(f64::from(c));
            }
        }
    }
    let beta_cnt = poisson_irls(&rows, &y)?;
    let filled_cnt = |i: usize, t: usize| -> f64 {
        match panel.cnt(i, t) {
            Some(c) => f64::from(c),
            None => dot(features.row(i, t), &beta_cnt).clamp(-30.0, 30.0).exp(),
        }
    };

    let mut design: Vec<Vec<f64>> = Vec::new();
    let mut log_ba = Vec::new();
    for t in 0..panel.t() {
        for i in 0..panel.n() {
            if let Some(b) = panel.ba(i, t) {
                if b > 0.0 {
                    let mut row = features.row(i, t).to_vec();
                    row.push(filled_cnt(i, t));
                    design.push(row);
                    log_ba.push(b.ln());
                }
            }
        }
    }
    let refs: Vec<&[f64]> = design.iter().map(Vec::as_slice).collect();
    let (beta, sigma2) = ols_fit(&refs, &log_ba)?;

    // Pixel-level occurrence frequency; pixels with no observed burnt
    // area fall back to the pooled rate.
    let mut pos = vec![0usize; panel.n()];
    let mut obs = vec![0usize; panel.n()];
    for t in 0..panel.t() {
        for i in 0..panel.n() {
            if let Some(b) = panel.ba(i, t) {
                obs[i] += 1;
                if b > 0.0 {
                    pos[i] += 1;
                }
            }
        }
    }
    let pooled = {
        let (p, o): (usize, usize) = (pos.iter().sum(), obs.iter().sum());
        if o == 0 {
            return Err(Error::DataIntegrity("no observed burnt area at all".into()));
        }
        p as f64 / o as f64
    };
    let occur = |i: usize| -> f64 {
        if obs[i] == 0 {
            pooled
        } else {
            pos[i] as f64 / obs[i] as f64
        }
    };

    let grid = ba_thresholds();
    targets
        .iter()
        .map(|&(i, t)| {
            let mut row = features.row(i, t).to_vec();
            row.push(filled_cnt(i, t));
            let mu = dot(&row, &beta);
            let p = occur(i);
            let sigma = sigma2.sqrt();
            let values = grid
                .iter()
                .map(|&u| (1.0 - p) + p * lognormal_cdf(u, mu, sigma))
                .collect();
            Ok(PredictiveCdf {
                pixel: i,
                period: t,
                values,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Point2;
    use crate::panel::PeriodLabel;
    use crate::rngx::{RngLattice, DOMAIN_MASK};
    use rand::SeedableRng;

    #[test]
    fn threshold_grids_match_published_lists() {
        let cnt = cnt_thresholds();
        let ba = ba_thresholds();
        assert_eq!(cnt.len(), 28);
        assert_eq!(ba.len(), 28);
        let cnt_expect: Vec<f64> = vec![
            0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0,
            22.0, 24.0, 26.0, 28.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0,
        ];
        let ba_expect: Vec<f64> = vec![
            0.0, 1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0, 150.0, 200.0,
            250.0, 300.0, 400.0, 500.0, 1000.0, 1500.0, 2000.0, 5000.0, 10000.0, 20000.0, 30000.0,
            40000.0, 50000.0, 100000.0,
        ];
        assert_eq!(cnt, cnt_expect);
        assert_eq!(ba, ba_expect);
        for grid in [&cnt, &ba] {
            for w in grid.windows(2) {
                assert!(w[0] < w[1]);
            }
        }
    }

    #[test]
    fn weight_golden_values() {
        let cnt = cnt_thresholds();
        let w = weight_vector(&cnt).unwrap();
        assert!((w.raw[0] - 2.49843867092e-4).abs() < 1e-13);
        assert!((w.raw[1] - 9.97507475708e-4).abs() < 1e-13);
        assert!((w.raw[27] - 0.453379643974).abs() < 1e-12);
        let ba = ba_thresholds();
        let wb = weight_vector(&ba).unwrap();
        assert!((wb.raw[27] - 0.982217295257).abs() < 1e-12);
        for v in [&w, &wb] {
            assert!((v.rescaled.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for pair in v.raw.windows(2) {
                assert!(pair[0] < pair[1], "raw weights must increase");
            }
        }
        assert!((w.rescaled[27] - 0.128637630013).abs() < 1e-12);
    }

    fn cdf_row(values: Vec<f64>) -> PredictiveCdf {
        PredictiveCdf {
            pixel: 0,
            period: 0,
            values,
        }
    }

    #[test]
    fn score_golden_cases() {
        let grid = cnt_thresholds();
        let w = weight_vector(&grid).unwrap();
        // Perfect forecast: the indicator step itself.
        let y = 14.0;
        let perfect = cdf_row(
            grid.iter()
                .map(|&u| if y <= u { 1.0 } else { 0.0 })
                .collect(),
        );
        let s = challenge_score(&[perfect.clone()], &[y], &grid, &w).unwrap();
        assert_eq!(s, 0.0);
        // Constant 1/2 against a value above every threshold: the
        // rescaled weights sum to one, so the score is exactly 1/4.
        let half = cdf_row(vec![0.5; grid.len()]);
        let s = challenge_score(&[half.clone()], &[1000.0], &grid, &w).unwrap();
        assert!((s - 0.25).abs() < 1e-12, "{s}");
        // Additivity over cells.
        let s2 = challenge_score(
            &[half.clone(), half.clone()],
            &[1000.0, 1000.0],
            &grid,
            &w,
        )
        .unwrap();
        assert!((s2 - 2.0 * s).abs() < 1e-12);
    }

    #[test]
    fn invalid_cdf_rows_are_rejected() {
        let grid = cnt_thresholds();
        let w = weight_vector(&grid).unwrap();
        let mut dec = vec![0.5; grid.len()];
        dec[10] = 0.2;
        let err = challenge_score(&[cdf_row(dec)], &[1.0], &grid, &w).unwrap_err();
        assert!(matches!(err, Error::DataIntegrity(_)), "{err}");
        let mut big = vec![0.5; grid.len()];
        big[27] = 1.5;
        let err = challenge_score(&[cdf_row(big)], &[1.0], &grid, &w).unwrap_err();
        assert!(matches!(err, Error::DataIntegrity(_)), "{err}");
    }

    #[test]
    fn true_cdf_beats_perturbed_cdfs() {
        // The expected score is minimized by the true conditional CDF;
        // with many cells the empirical score must prefer the truth to
        // random monotone perturbations almost always.
        use rand::Rng;
        let grid = cnt_thresholds();
        let w = weight_vector(&grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let lambdas: [f64; 4] = [0.3, 1.5, 4.0, 9.0];
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for c in 0..4000 {
            let lambda = lambdas[c % lambdas.len()];
            // Poisson sampling by inversion.
            let mut k = 0u32;
            let mut acc = (-lambda).exp();
            let mut cum = acc;
            let u: f64 = rng.gen();
            while u > cum && k < 200 {
                k += 1;
                acc *= lambda / f64::from(k);
                cum += acc;
            }
            ys.push(f64::from(k));
            let values = grid
                .iter()
                .map(|&t| poisson_cdf(t as u64, lambda))
                .collect();
            rows.push(cdf_row(values));
        }
        let true_score = challenge_score(&rows, &ys, &grid, &w).unwrap();
        let mut wins = 0;
        let trials = 100;
        for _ in 0..trials {
            let shift: f64 = rng.gen_range(-0.08..0.08);
            let scale: f64 = rng.gen_range(0.85..1.15);
            let perturbed: Vec<PredictiveCdf> = rows
                .iter()
                .map(|r| {
                    let mut v: Vec<f64> = r
                        .values
                        .iter()
                        .map(|&f| (f * scale + shift).clamp(0.0, 1.0))
                        .collect();
                    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    cdf_row(v)
                })
                .collect();
            if true_score <= challenge_score(&perturbed, &ys, &grid, &w).unwrap() {
                wins += 1;
            }
        }
        assert!(wins >= 95, "true CDF won only {wins}/{trials}");
    }

    fn month_panel() -> ObservationPanel {
        // 6 pixels, 3 years of 4 months; the middle year is incomplete
        // with per-period patterns of different sizes.
        let n = 6;
        let locs: Vec<Point2> = (0..n).map(|i| Point2::new(i as f64, 0.0)).collect();
        let mut periods = Vec::new();
        for year in 2000..2003 {
            for month in 3..7 {
                periods.push(PeriodLabel { year, month });
            }
        }
        let t = periods.len();
        let mut ba = vec![Some(1.0); n * t];
        let mut cnt = vec![Some(2u32); n * t];
        // Periods 4..8 belong to 2001; hide a growing prefix of pixels.
        for (k, p) in (4..8).enumerate() {
            for i in 0..=k {
                ba[p * n + i] = None;
            }
            for i in 0..=(k + 1).min(n - 1) {
                cnt[p * n + i] = None;
            }
        }
        ObservationPanel::new(locs, periods, ba, cnt).unwrap()
    }

    #[test]
    fn fixed_month_mask_matches_donor_months_and_counts() {
        let panel = month_panel();
        let lattice = RngLattice::new(99);
        let mut rng = lattice.stream(DOMAIN_MASK, 0, 0);
        let mask = make_cv_mask(&panel, &panel, CvScheme::FixedMonth, &mut rng).unwrap();
        assert_eq!(mask.pairs.len(), 4);
        let mut total = 0;
        for &(d, g) in &mask.pairs {
            assert_eq!(panel.periods()[d].month, panel.periods()[g].month);
            assert_ne!(d, g, "donor is incomplete, target complete");
            let donor_cells = panel.period_missing(d, Variable::Ba).len()
                + panel.period_missing(d, Variable::Cnt).len();
            let target_cells = mask.cells.iter().filter(|c| c.period == g).count();
            assert_eq!(donor_cells, target_cells);
            total += donor_cells;
        }
        assert_eq!(mask.cells.len(), total);
        for cell in &mask.cells {
            match cell.variable {
                Variable::Ba => assert!(panel.ba(cell.pixel, cell.period).is_some()),
                Variable::Cnt => assert!(panel.cnt(cell.pixel, cell.period).is_some()),
            }
        }
        let masked = apply_mask(&panel, &mask).unwrap();
        assert_eq!(
            masked.missing_ba_count(),
            panel.missing_ba_count() + mask.cells.iter().filter(|c| c.variable == Variable::Ba).count()
        );
        // Same seed, same mask.
        let mut rng2 = lattice.stream(DOMAIN_MASK, 0, 0);
        let mask2 = make_cv_mask(&panel, &panel, CvScheme::FixedMonth, &mut rng2).unwrap();
        assert_eq!(mask.cells, mask2.cells);
    }

    #[test]
    fn random_month_mask_pairs_every_donor() {
        let panel = month_panel();
        let mut rng = RngLattice::new(7).stream(DOMAIN_MASK, 0, 0);
        let mask = make_cv_mask(&panel, &panel, CvScheme::RandomMonth, &mut rng).unwrap();
        assert_eq!(mask.pairs.len(), 4);
        for &(_, g) in &mask.pairs {
            assert!(panel.period_complete(g));
        }
        let sum_donor: usize = mask
            .pairs
            .iter()
            .map(|&(d, _)| {
                panel.period_missing(d, Variable::Ba).len()
                    + panel.period_missing(d, Variable::Cnt).len()
            })
            .sum();
        assert_eq!(mask.cells.len(), sum_donor);
    }

    #[test]
    fn mask_requires_complete_and_incomplete_periods() {
        let n = 4;
        let locs: Vec<Point2> = (0..n).map(|i| Point2::new(i as f64, 0.0)).collect();
        let periods = vec![PeriodLabel { year: 2000, month: 3 }; 2];
        let full = ObservationPanel::new(
            locs.clone(),
            periods.clone(),
            vec![Some(1.0); n * 2],
            vec![Some(1u32); n * 2],
        )
        .unwrap();
        let mut rng = RngLattice::new(1).stream(DOMAIN_MASK, 0, 0);
        let err = make_cv_mask(&full, &full, CvScheme::FixedMonth, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)), "{err}");
        let mut ba = vec![Some(1.0); n * 2];
        ba[0] = None;
        ba[n] = None;
        let holey = ObservationPanel::new(locs, periods, ba, vec![Some(1u32); n * 2]).unwrap();
        let err = make_cv_mask(&holey, &holey, CvScheme::FixedMonth, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)), "{err}");
    }

    #[test]
    fn ols_recovers_exact_linear_data() {
        let rows_data: Vec<Vec<f64>> = (0..40)
            .map(|k| {
                let x1 = (k % 7) as f64;
                let x2 = (k % 5) as f64 * 0.5;
                vec![1.0, x1, x2]
            })
            .collect();
        let y: Vec<f64> = rows_data.iter().map(|r| 2.0 - 3.0 * r[1] + 0.7 * r[2]).collect();
        let refs: Vec<&[f64]> = rows_data.iter().map(Vec::as_slice).collect();
        let (beta, sigma2) = ols_fit(&refs, &y).unwrap();
        assert!((beta[0] - 2.0).abs() < 1e-8);
        assert!((beta[1] + 3.0).abs() < 1e-8);
        assert!((beta[2] - 0.7).abs() < 1e-8);
        assert!(sigma2 < 1e-12);
    }

    #[test]
    fn poisson_irls_intercept_only_matches_mle() {
        // Counts with mean exactly 4: the MLE intercept is log 4.
        let y: Vec<f64> = vec![3.0, 5.0, 4.0, 4.0, 2.0, 6.0, 4.0, 4.0];
        assert!((y.iter().sum::<f64>() / y.len() as f64 - 4.0).abs() < 1e-12);
        let rows_data: Vec<Vec<f64>> = vec![vec![1.0]; y.len()];
        let refs: Vec<&[f64]> = rows_data.iter().map(Vec::as_slice).collect();
        let beta = poisson_irls(&refs, &y).unwrap();
        assert!((beta[0] - 4.0f64.ln()).abs() < 1e-6, "{}", beta[0]);
    }

    #[test]
    fn singular_design_is_rejected() {
        let rows_data: Vec<Vec<f64>> = (0..10).map(|k| vec![1.0, k as f64, 2.0 * k as f64]).collect();
        let refs: Vec<&[f64]> = rows_data.iter().map(Vec::as_slice).collect();
        let y = vec![1.0; 10];
        assert!(ols_fit(&refs, &y).is_err());
        assert!(poisson_irls(&refs, &y).is_err());
    }

    #[test]
    fn benchmarks_emit_valid_cdf_rows() {
        // Small panel with a hole; both benchmarks must produce proper
        // distribution functions at the held-out cells.
        let n = 9;
        let t = 8;
        let locs: Vec<Point2> = (0..n)
            .map(|i| Point2::new((i % 3) as f64, (i / 3) as f64))
            .collect();
        let periods: Vec<PeriodLabel> = (0..t)
            .map(|k| PeriodLabel {
                year: 2000 + (k / 4) as i32,
                month: 3 + (k % 4) as u32,
            })
            .collect();
        let mut ba = Vec::new();
        let mut cnt = Vec::new();
        let mut state = 0x243f6a8885a308d3u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _ in 0..n * t {
            let c = (next() % 5) as u32;
            let b = if c == 0 { 0.0 } else { c as f64 * 3.5 + (next() % 10) as f64 };
            ba.push(Some(b));
            cnt.push(Some(c));
        }
        ba[3] = None;
        cnt[3] = None;
        cnt[10] = None;
        let panel = ObservationPanel::new(locs, periods, ba, cnt).unwrap();
        let mut features = FeatureMatrix::new(n, t, 3);
        for tt in 0..t {
            for i in 0..n {
                features.set_row(i, tt, &[1.0, (i % 3) as f64, (i / 3) as f64]);
            }
        }
        let targets = vec![(3usize, 0usize), (1, 1), (2, 5)];
        let grid_ba = ba_thresholds();
        let grid_cnt = cnt_thresholds();
        for row in benchmark_ba(&panel, &features, &targets).unwrap() {
            validate_cdf_row(&row.values, grid_ba.len()).unwrap();
        }
        for row in benchmark_cnt(&panel, &features, &targets).unwrap() {
            validate_cdf_row(&row.values, grid_cnt.len()).unwrap();
        }
    }
}
