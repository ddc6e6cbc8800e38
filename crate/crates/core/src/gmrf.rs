//! Gaussian Markov random fields approximating a Matern covariance.
//!
//! The latent field has unit marginal variance, range parameter `phi`
//! (correlation ~0.14 at distance phi... the nu = 1 Matern shape), and a
//! nugget mixing ratio `r`: correlation r (d/phi) K1(d/phi) between
//! distinct locations. Its sparse precision on a mesh is
//!
//!   Q(phi) = (4 pi)^{-1} phi^2 (phi^{-4} C + 2 phi^{-2} G1 + G2),
//!
//! which lives on the two-hop mesh pattern and is positive definite for
//! any phi > 0.

use nalgebra::DMatrix;
use rand::Rng;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mathx::bessel_k1;
use crate::mesh::{FemMatrices, ProjectionMatrix};
use crate::sparse::{NumericFactor, Pattern, SymSparse, SymbolicFactor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternParams {
    /// Range phi > 0, in the distance units of the mesh coordinates.
    pub range: f64,
    /// Spatial share r in [0, 1]; 1 - r is the nugget.
    pub ratio: f64,
}

impl MaternParams {
    pub fn new(range: f64, ratio: f64) -> Result<MaternParams> {
        let p = MaternParams { range, ratio };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.range > 0.0) || !self.range.is_finite() {
            return Err(Error::Parameter(format!("range {} must be positive", self.range)));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Parameter(format!("ratio {} must lie in [0, 1]", self.ratio)));
        }
        Ok(())
    }
}

/// Correlation at distance `d` under `params`, including the nugget jump
/// at zero.
pub fn matern_correlation(d: f64, params: &MaternParams) -> Result<f64> {
    params.validate()?;
    if d < 0.0 {
        return Err(Error::Parameter(format!("distance {d} must be nonnegative")));
    }
    if d == 0.0 {
        return Ok(1.0);
    }
    let x = d / params.range;
    Ok(params.ratio * x * bessel_k1(x)?)
}

/// Assemble Q(phi) on the FEM pattern. All entries are finite and the
/// result factorizes; entries outside the two-hop pattern do not exist.
pub fn assemble_precision(fem: &FemMatrices, phi: f64) -> Result<SymSparse> {
    if !(phi > 0.0) || !phi.is_finite() {
        return Err(Error::Parameter(format!("phi {phi} must be positive")));
    }
    let mut q = fem.g2.clone();
    q.axpy(2.0 / (phi * phi), &fem.g1);
    let pattern = fem.pattern().clone();
    let inv4 = phi.powi(-4);
    for i in 0..fem.n() {
        let idx = pattern.index_of(i, i).expect("diagonal missing from pattern");
        q.values_mut()[idx] += inv4 * fem.c_lumped[i];
    }
    q.scale(phi * phi / (4.0 * std::f64::consts::PI));
    if q.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite precision entry at phi {phi}")));
    }
    Ok(q)
}

/// Reusable symbolic factorization for every matrix sharing one mesh
/// pattern (precision matrices and latent-conditional matrices alike).
pub struct GmrfSolver {
    sym: SymbolicFactor,
}

impl GmrfSolver {
    pub fn new(pattern: &Arc<Pattern>) -> GmrfSolver {
        GmrfSolver { sym: SymbolicFactor::analyze_rcm(pattern) }
    }

    pub fn factor(&self, m: &SymSparse) -> Result<NumericFactor<'_>> {
        self.sym.factor(m)
    }
}

/// Draw one field w ~ N(0, Q^{-1}).
pub fn sample_gmrf(factor: &NumericFactor, rng: &mut impl Rng) -> Vec<f64> {
    factor.sample_zero_mean(rng)
}

/// Dense location covariance r A Q^{-1} A' + (1 - r) I. Guarded by a row
/// cap because the result is dense in the number of locations.
pub fn approx_covariance(
    a: &ProjectionMatrix,
    fem: &FemMatrices,
    params: &MaternParams,
    max_rows: usize,
) -> Result<DMatrix<f64>> {
    params.validate()?;
    let n = a.n_rows();
    if n > max_rows {
        return Err(Error::SizeCap(format!(
            "{n} locations exceed the dense covariance cap {max_rows}"
        )));
    }
    let mut cov = DMatrix::identity(n, n);
    if params.ratio == 0.0 {
        return Ok(cov);
    }
    cov *= 1.0 - params.ratio;
    let q = assemble_precision(fem, params.range)?;
    let solver = GmrfSolver::new(fem.pattern());
    let factor = solver.factor(&q)?;
    let mut rhs = vec![0.0; fem.n()];
    for j in 0..n {
        rhs.fill(0.0);
        for &(k, w) in a.row(j) {
            rhs[k] += w;
        }
        let col = factor.solve(&rhs);
        for i in 0..n {
            cov[(i, j)] += params.ratio * a.row_dot(i, &col);
        }
    }
    Ok(cov)
}
