//! Streaming regularized least squares.
//!
//! The posterior-mean problem `argmin_θ Σ_s ‖y_s − Φ_s θ‖²/σ² + ‖θ‖²_{Σ₀⁻¹}`
//! is solved recursively: the normal matrix `A = Σ₀⁻¹ + (1/σ²)ΣΦ_sᵀΦ_s` is
//! kept as a Cholesky factor that absorbs each sample through rank-one
//! rotations, so no step ever costs more than O(n·p²). `batch_tikhonov` is
//! the dense one-shot solution of the same problem and serves as the oracle
//! the recursive path is tested against.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::{build_design, mean_term, ModelSpec};

/// State of the recursive solver: Cholesky factor of the normal matrix plus
/// the information vector.
///
/// `L` is lower-triangular with `L·Lᵀ = A`; its diagonal never decreases as
/// samples arrive. The prior enters as a diagonal PRECISION `Σ₀⁻¹`, so an
/// unregularized coordinate is expressible as a zero entry (the solve then
/// fails for that coordinate until data excite it).
#[derive(Debug, Clone, PartialEq)]
pub struct RlsState {
    l: DMatrix<f64>,
    b: DVector<f64>,
    t: usize,
    sigma2: f64,
}

impl RlsState {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Samples absorbed so far.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Lower-triangular factor `L` with `L·Lᵀ = Σ₀⁻¹ + (1/σ²)ΣΦᵀΦ`.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Information vector `(1/σ²)ΣΦᵀy`.
    pub fn info_vector(&self) -> &DVector<f64> {
        &self.b
    }
}

/// Fresh state holding only the prior: `L = diag(√(Σ₀⁻¹))`, `b = 0`.
pub fn rls_init(prior_precision: &DVector<f64>, sigma2: f64) -> Result<RlsState> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sigma2 must be strictly positive, got {sigma2}"
        )));
    }
    for (i, &v) in prior_precision.iter().enumerate() {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "prior precision entry {i} must be nonnegative, got {v}"
            )));
        }
    }
    let p = prior_precision.len();
    let mut l = DMatrix::zeros(p, p);
    for i in 0..p {
        l[(i, i)] = prior_precision[i].sqrt();
    }
    Ok(RlsState {
        l,
        b: DVector::zeros(p),
        t: 0,
        sigma2,
    })
}

/// Absorb one sample: `n` rank-one updates `A ← A + (row_j/σ)(row_j/σ)ᵀ` and
/// `b ← b + (1/σ²)Φᵀy`. `y` must already be mean-corrected for SP/SP2.
pub fn rls_update(state: &mut RlsState, design: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    let p = state.dim();
    if design.ncols() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: design.ncols(),
            context: "design columns",
        });
    }
    if design.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: design.nrows(),
            got: y.len(),
            context: "target rows",
        });
    }
    if design.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rls update input"));
    }
    let sigma = state.sigma2.sqrt();
    let mut row = DVector::zeros(p);
    for j in 0..design.nrows() {
        for (k, v) in design.row(j).iter().enumerate() {
            row[k] = v / sigma;
        }
        rank_one_update(&mut state.l, &mut row);
    }
    state.b += design.transpose() * y / state.sigma2;
    state.t += 1;
    Ok(())
}

/// In-place `L·Lᵀ + w·wᵀ → L·Lᵀ` via Givens rotations on the augmented
/// factor `[L | w]`. Add-only: diagonal entries never decrease, and a zero
/// diagonal (unregularized, unexcited coordinate) is handled without division.
fn rank_one_update(l: &mut DMatrix<f64>, w: &mut DVector<f64>) {
    let p = w.len();
    for k in 0..p {
        let wk = w[k];
        if wk == 0.0 {
            continue;
        }
        let a = l[(k, k)];
        let r = a.hypot(wk);
        let (c, s) = (a / r, wk / r);
        l[(k, k)] = r;
        let col = k * p;
        let (lslice, wslice) = (l.as_mut_slice(), w.as_mut_slice());
        for (li, wi) in lslice[col + k + 1..col + p]
            .iter_mut()
            .zip(wslice[k + 1..p].iter_mut())
        {
            let (t1, t2) = (*li, *wi);
            *li = c * t1 + s * t2;
            *wi = c * t2 - s * t1;
        }
    }
}

/// Posterior mean `θ̂ = A⁻¹b` by two triangular solves. Read-only.
pub fn rls_solve(state: &RlsState) -> Result<DVector<f64>> {
    let p = state.dim();
    let max_diag = (0..p).map(|k| state.l[(k, k)]).fold(0.0f64, f64::max);
    let tol = 1e-12 * max_diag;
    for k in 0..p {
        let diag = state.l[(k, k)];
        if diag <= tol {
            return Err(Error::SingularCoordinate { index: k, diag });
        }
    }
    let z = state
        .l
        .solve_lower_triangular(&state.b)
        .ok_or_else(|| Error::SingularSystem("forward substitution failed".into()))?;
    state
        .l
        .tr_solve_lower_triangular(&z)
        .ok_or_else(|| Error::SingularSystem("back substitution failed".into()))
}

/// Dense one-shot solution of the same regularized problem; the recursive
/// path must agree with this to roundoff.
pub fn batch_tikhonov(
    designs: &[DMatrix<f64>],
    ys: &[DVector<f64>],
    prior_precision: &DVector<f64>,
    sigma2: f64,
) -> Result<DVector<f64>> {
    if designs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: designs.len(),
            got: ys.len(),
            context: "sample count",
        });
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sigma2 must be strictly positive, got {sigma2}"
        )));
    }
    let p = prior_precision.len();
    let mut a = DMatrix::from_diagonal(prior_precision);
    let mut b = DVector::zeros(p);
    for (design, y) in designs.iter().zip(ys) {
        if design.ncols() != p || design.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: design.ncols(),
                context: "stacked design",
            });
        }
        a += design.transpose() * design / sigma2;
        b += design.transpose() * y / sigma2;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::SingularSystem("normal matrix is not positive definite".into()))?;
    Ok(chol.solve(&b))
}

/// Model prediction `ŷ = Φ(x)·θ̂ + mean(x)` (SP/SP2 re-add their rigid-body
/// mean).
pub fn predict(
    spec: &ModelSpec,
    theta: &DVector<f64>,
    x: &crate::dynamics::JointState,
) -> Result<DVector<f64>> {
    if theta.len() != spec.p_theta() {
        return Err(Error::DimensionMismatch {
            expected: spec.p_theta(),
            got: theta.len(),
            context: "theta",
        });
    }
    Ok(build_design(spec, x)? * theta + mean_term(spec, x)?)
}
