//! Observation panel of gridded burnt areas and fire counts.
//!
//! The panel stores `N` pixels by `T` monthly periods of the pair
//! (BA, CNT) with explicit missingness. Zero BA at an observed cell is
//! equivalent to zero CNT at that cell, which lets `propagate_zeros`
//! recover one variable whenever the other is an observed zero. The
//! occurrence indicator derived afterwards is missing only where both
//! variables remain missing.
//!
//! Missing values are an explicit `Option`, never a sentinel number;
//! zero is a meaningful observation here. Periods are stored flat with
//! calendar labels attached because the models treat them as
//! independent replicates.

use crate::error::{Error, Result};
use crate::mesh::Point2;

/// Calendar label of one period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PeriodLabel {
    pub year: i32,
    /// 1-based calendar month.
    pub month: u32,
}

/// Which of the two panel variables a record refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variable {
    Ba,
    Cnt,
}

impl Variable {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variable::Ba => "ba",
            Variable::Cnt => "cnt",
        }
    }
}

impl std::str::FromStr for Variable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ba" | "BA" => Ok(Variable::Ba),
            "cnt" | "CNT" => Ok(Variable::Cnt),
            other => Err(Error::Parameter(format!("unknown variable {other:?}"))),
        }
    }
}

/// N pixels by T periods of (BA, CNT) with explicit missingness.
///
/// Cell storage is period-major: entry `(i, t)` lives at `t * n + i`,
/// so a period's cross-section is contiguous.
#[derive(Debug, Clone)]
pub struct ObservationPanel {
    locations: Vec<Point2>,
    periods: Vec<PeriodLabel>,
    ba: Vec<Option<f64>>,
    cnt: Vec<Option<u32>>,
}

impl ObservationPanel {
    /// Validates dimensions and value ranges. Cross-variable zero
    /// consistency is checked by `propagate_zeros`, not here, so that
    /// corrupt inputs can be loaded and then rejected with a precise
    /// error.
    pub fn new(
        locations: Vec<Point2>,
        periods: Vec<PeriodLabel>,
        ba: Vec<Option<f64>>,
        cnt: Vec<Option<u32>>,
    ) -> Result<Self> {
        let cells = locations.len() * periods.len();
        if ba.len() != cells || cnt.len() != cells {
            return Err(Error::Dimension(format!(
                "panel needs {} cells, got ba {} cnt {}",
                cells,
                ba.len(),
                cnt.len()
            )));
        }
        for (k, v) in ba.iter().enumerate() {
            if let Some(x) = v {
                if !x.is_finite() || *x < 0.0 {
                    return Err(Error::DataIntegrity(format!(
                        "ba {x} at flat cell {k} is not a finite nonnegative value"
                    )));
                }
            }
        }
        for label in &periods {
            if label.month == 0 || label.month > 12 {
                return Err(Error::DataIntegrity(format!(
                    "month {} out of range",
                    label.month
                )));
            }
        }
        Ok(Self {
            locations,
            periods,
            ba,
            cnt,
        })
    }

    pub fn n(&self) -> usize {
        self.locations.len()
    }

    pub fn t(&self) -> usize {
        self.periods.len()
    }

    pub fn locations(&self) -> &[Point2] {
        &self.locations
    }

    pub fn periods(&self) -> &[PeriodLabel] {
        &self.periods
    }

    #[inline]
    fn idx(&self, pixel: usize, period: usize) -> usize {
        debug_assert!(pixel < self.n() && period < self.t());
        period * self.n() + pixel
    }

    pub fn ba(&self, pixel: usize, period: usize) -> Option<f64> {
        self.ba[self.idx(pixel, period)]
    }

    pub fn cnt(&self, pixel: usize, period: usize) -> Option<u32> {
        self.cnt[self.idx(pixel, period)]
    }

    pub fn set_ba(&mut self, pixel: usize, period: usize, v: Option<f64>) {
        let k = self.idx(pixel, period);
        self.ba[k] = v;
    }

    pub fn set_cnt(&mut self, pixel: usize, period: usize, v: Option<u32>) {
        let k = self.idx(pixel, period);
        self.cnt[k] = v;
    }

    pub fn missing_ba_count(&self) -> usize {
        self.ba.iter().filter(|v| v.is_none()).count()
    }

    pub fn missing_cnt_count(&self) -> usize {
        self.cnt.iter().filter(|v| v.is_none()).count()
    }

    /// Cells where both variables are missing; after zero propagation
    /// this is exactly where the occurrence indicator is undetermined.
    pub fn both_missing_count(&self) -> usize {
        self.ba
            .iter()
            .zip(&self.cnt)
            .filter(|(b, c)| b.is_none() && c.is_none())
            .count()
    }

    /// Missing cells of one variable within a single period.
    pub fn period_missing(&self, period: usize, variable: Variable) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| match variable {
                Variable::Ba => self.ba(i, period).is_none(),
                Variable::Cnt => self.cnt(i, period).is_none(),
            })
            .collect()
    }

    /// True when every cell of the period is observed for both variables.
    pub fn period_complete(&self, period: usize) -> bool {
        (0..self.n()).all(|i| self.ba(i, period).is_some() && self.cnt(i, period).is_some())
    }
}

/// Occurrence indicator per cell: `Some(true)` where fire occurred,
/// `Some(false)` where none did, `None` where undetermined.
#[derive(Debug, Clone)]
pub struct IndicatorPanel {
    n: usize,
    t: usize,
    z: Vec<Option<bool>>,
}

impl IndicatorPanel {
    /// Build directly from a period-major cell vector (index = period * n + pixel).
    pub fn new(n: usize, t: usize, z: Vec<Option<bool>>) -> Result<IndicatorPanel> {
        if z.len() != n * t {
            return Err(Error::Dimension(format!(
                "indicator has {} cells, expected {} x {}",
                z.len(),
                n,
                t
            )));
        }
        Ok(IndicatorPanel { n, t, z })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn get(&self, pixel: usize, period: usize) -> Option<bool> {
        self.z[period * self.n + pixel]
    }

    pub fn missing_count(&self) -> usize {
        self.z.iter().filter(|v| v.is_none()).count()
    }
}

fn integrity_error(pixel: usize, period: usize, ba: f64, cnt: u32) -> Error {
    Error::DataIntegrity(format!(
        "pixel {pixel} period {period}: ba {ba} and cnt {cnt} disagree on zero status"
    ))
}

/// Fill a missing variable with zero wherever the other variable is an
/// observed zero. Positive values are never invented; cells where the
/// observed pair disagrees on zero status are rejected.
pub fn propagate_zeros(panel: &ObservationPanel) -> Result<ObservationPanel> {
    let mut out = panel.clone();
    for t in 0..panel.t() {
        for i in 0..panel.n() {
            match (panel.ba(i, t), panel.cnt(i, t)) {
                (Some(b), Some(c)) => {
                    if (b == 0.0) != (c == 0) {
                        return Err(integrity_error(i, t, b, c));
                    }
                }
                (Some(b), None) if b == 0.0 => out.set_cnt(i, t, Some(0)),
                (None, Some(0)) => out.set_ba(i, t, Some(0.0)),
                _ => {}
            }
        }
    }
    Ok(out)
}

/// Derive the occurrence indicator. Expects a zero-propagated panel;
/// any observed value still determines the cell on its own.
pub fn build_indicator(panel: &ObservationPanel) -> Result<IndicatorPanel> {
    let mut z = Vec::with_capacity(panel.n() * panel.t());
    for t in 0..panel.t() {
        for i in 0..panel.n() {
            let cell = match (panel.ba(i, t), panel.cnt(i, t)) {
                (Some(b), Some(c)) => {
                    if (b == 0.0) != (c == 0) {
                        return Err(integrity_error(i, t, b, c));
                    }
                    Some(b > 0.0)
                }
                (Some(b), None) => Some(b > 0.0),
                (None, Some(c)) => Some(c > 0),
                (None, None) => None,
            };
            z.push(cell);
        }
    }
    Ok(IndicatorPanel {
        n: panel.n(),
        t: panel.t(),
        z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_locations(side: usize) -> Vec<Point2> {
        let mut pts = Vec::new();
        for j in 0..side {
            for i in 0..side {
                pts.push(Point2::new(i as f64, j as f64));
            }
        }
        pts
    }

    fn labels(t: usize) -> Vec<PeriodLabel> {
        (0..t)
            .map(|k| PeriodLabel {
                year: 2000 + (k / 7) as i32,
                month: 3 + (k % 7) as u32,
            })
            .collect()
    }

    fn panel_from_cells(cells: &[(Option<f64>, Option<u32>)]) -> ObservationPanel {
        let n = cells.len();
        let locations = (0..n).map(|i| Point2::new(i as f64, 0.5)).collect();
        let ba = cells.iter().map(|c| c.0).collect();
        let cnt = cells.iter().map(|c| c.1).collect();
        ObservationPanel::new(locations, labels(1), ba, cnt).unwrap()
    }

    #[test]
    fn propagation_fills_only_zero_partners() {
        let panel = panel_from_cells(&[
            (Some(0.0), None),
            (Some(5.2), None),
            (None, Some(0)),
            (None, Some(3)),
            (None, None),
        ]);
        let out = propagate_zeros(&panel).unwrap();
        assert_eq!(out.cnt(0, 0), Some(0));
        assert_eq!(out.cnt(1, 0), None);
        assert_eq!(out.ba(2, 0), Some(0.0));
        assert_eq!(out.ba(3, 0), None);
        assert_eq!(out.ba(4, 0), None);
        assert_eq!(out.cnt(4, 0), None);

        let again = propagate_zeros(&out).unwrap();
        for i in 0..panel.n() {
            assert_eq!(again.ba(i, 0), out.ba(i, 0));
            assert_eq!(again.cnt(i, 0), out.cnt(i, 0));
        }
    }

    #[test]
    fn inconsistent_observed_pair_is_rejected() {
        let panel = panel_from_cells(&[(Some(0.0), Some(3)), (Some(1.0), Some(1)), (None, None)]);
        let err = propagate_zeros(&panel).unwrap_err();
        assert!(matches!(err, Error::DataIntegrity(_)), "{err}");
        let err = build_indicator(&panel).unwrap_err();
        assert!(matches!(err, Error::DataIntegrity(_)), "{err}");
    }

    #[test]
    fn indicator_case_mapping() {
        let panel = panel_from_cells(&[
            (Some(2.5), None),
            (None, Some(4)),
            (Some(0.0), Some(0)),
            (Some(1.0), Some(2)),
            (None, None),
        ]);
        let z = build_indicator(&propagate_zeros(&panel).unwrap()).unwrap();
        assert_eq!(z.get(0, 0), Some(true));
        assert_eq!(z.get(1, 0), Some(true));
        assert_eq!(z.get(2, 0), Some(false));
        assert_eq!(z.get(3, 0), Some(true));
        assert_eq!(z.get(4, 0), None);
        assert_eq!(z.missing_count(), 1);
    }

    #[test]
    fn indicator_never_contradicts_observed_data() {
        // Pseudo-random tri-state panel; the indicator must agree with
        // every observed value and be missing exactly at double-missing
        // cells after propagation.
        let n = 60;
        let t = 5;
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let mut ba = Vec::new();
        let mut cnt = Vec::new();
        for _ in 0..n * t {
            let occurred = next() % 2 == 0;
            let (b, c) = if occurred {
                (1.0 + (next() % 100) as f64 / 10.0, 1 + (next() % 9) as u32)
            } else {
                (0.0, 0u32)
            };
            ba.push(if next() % 4 == 0 { None } else { Some(b) });
            cnt.push(if next() % 4 == 0 { None } else { Some(c) });
        }
        let panel =
            ObservationPanel::new(square_locations(8)[..n].to_vec(), labels(t), ba, cnt).unwrap();
        let filled = propagate_zeros(&panel).unwrap();
        let z = build_indicator(&filled).unwrap();
        for tt in 0..t {
            for i in 0..n {
                if let Some(b) = panel.ba(i, tt) {
                    assert_eq!(z.get(i, tt), Some(b > 0.0));
                }
                if let Some(c) = panel.cnt(i, tt) {
                    assert_eq!(z.get(i, tt), Some(c > 0));
                }
                assert_eq!(
                    z.get(i, tt).is_none(),
                    filled.ba(i, tt).is_none() && filled.cnt(i, tt).is_none()
                );
            }
        }
        assert_eq!(z.missing_count(), filled.both_missing_count());
    }

    #[test]
    fn engineered_masking_panel_recovers_indicator_counts() {
        // Panel engineered to the published masking pattern: 3503
        // pixels, 161 periods, each variable masked at exactly 80,000
        // cells, 48,947 of them jointly. After zero propagation the
        // occurrence indicator must be undetermined at exactly the
        // jointly masked cells.
        let n = 3503usize;
        let t = 161usize;
        let cells = n * t;
        assert_eq!(cells, 563_983);
        let both_missing = 48_947usize;
        let per_variable_missing = 80_000usize;
        // Single-missing splits follow the published zero/nonzero
        // proportions among masked cells (roughly 3.3% zero partner,
        // 2.2% positive partner).
        let ba_missing_cnt_zero = 18_825usize;
        let ba_missing_cnt_pos = per_variable_missing - both_missing - ba_missing_cnt_zero;
        let cnt_missing_ba_zero = 18_745usize;
        let cnt_missing_ba_pos = per_variable_missing - both_missing - cnt_missing_ba_zero;

        let mut ba: Vec<Option<f64>> = Vec::with_capacity(cells);
        let mut cnt: Vec<Option<u32>> = Vec::with_capacity(cells);
        let mut push = |b: Option<f64>, c: Option<u32>, count: usize| {
            for _ in 0..count {
                ba.push(b);
                cnt.push(c);
            }
        };
        push(None, None, both_missing);
        push(None, Some(0), ba_missing_cnt_zero);
        push(None, Some(2), ba_missing_cnt_pos);
        push(Some(0.0), None, cnt_missing_ba_zero);
        push(Some(7.5), None, cnt_missing_ba_pos);
        let observed =
            cells - both_missing - ba_missing_cnt_zero - ba_missing_cnt_pos - cnt_missing_ba_zero
                - cnt_missing_ba_pos;
        let observed_zero = observed * 6 / 10;
        push(Some(0.0), Some(0), observed_zero);
        push(Some(3.0), Some(1), observed - observed_zero);
        assert_eq!(ba.len(), cells);

        let locations = (0..n)
            .map(|i| Point2::new((i % 60) as f64, (i / 60) as f64))
            .collect();
        let panel = ObservationPanel::new(locations, labels(t), ba, cnt).unwrap();
        assert_eq!(panel.missing_ba_count(), per_variable_missing);
        assert_eq!(panel.missing_cnt_count(), per_variable_missing);

        let filled = propagate_zeros(&panel).unwrap();
        let z = build_indicator(&filled).unwrap();
        assert_eq!(z.missing_count(), both_missing);
        assert_eq!(
            filled.missing_ba_count(),
            per_variable_missing - ba_missing_cnt_zero
        );
        assert_eq!(
            filled.missing_cnt_count(),
            per_variable_missing - cnt_missing_ba_zero
        );
    }
}
