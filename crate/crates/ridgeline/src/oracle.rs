//! Independent reference implementations used by the test suites.
//!
//! Everything here recomputes a quantity through a deliberately different
//! route than the production code: torques via explicitly assembled
//! mass/Coriolis/gravity matrices instead of the regressor, and the negative
//! log marginal likelihood via the dense `tn×tn` covariance instead of the
//! weight-space factorization. Agreement between the two routes is what the
//! tests check.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::JointState;

/// Friction-free torques of the two-link arm assembled from the closed-form
/// equations of motion `M(q)q̈ + C(q,q̇)q̇ + G(q)`, parameterized by the base
/// parameter vector `π ∈ ℝ⁵`.
pub fn closed_form_torques(x: &JointState, pi: &DVector<f64>, gravity: f64) -> DVector<f64> {
    assert_eq!(
        x.joints(),
        2,
        "closed-form dynamics are for the two-link arm"
    );
    assert_eq!(pi.len(), 5);
    let (q1, q2) = (x.q()[0], x.q()[1]);
    let (dq1, dq2) = (x.dq()[0], x.dq()[1]);
    let (c2, s2) = (q2.cos(), q2.sin());

    let m = DMatrix::from_row_slice(
        2,
        2,
        &[
            pi[0] + pi[1] + 2.0 * pi[2] * c2,
            pi[1] + pi[2] * c2,
            pi[1] + pi[2] * c2,
            pi[1],
        ],
    );
    let c = DMatrix::from_row_slice(
        2,
        2,
        &[
            -pi[2] * s2 * dq2,
            -pi[2] * s2 * (dq1 + dq2),
            pi[2] * s2 * dq1,
            0.0,
        ],
    );
    let g = DVector::from_row_slice(&[
        pi[3] * gravity * q1.cos() + pi[4] * gravity * (q1 + q2).cos(),
        pi[4] * gravity * (q1 + q2).cos(),
    ]);
    m * x.ddq() + c * x.dq() + g
}

/// Potential energy `U(q) = g·(π₄ sin q₁ + π₅ sin(q₁+q₂))` of the two-link
/// arm. Its gradient with respect to `q` is the gravity torque vector.
pub fn potential_energy(q: &[f64; 2], pi: &DVector<f64>, gravity: f64) -> f64 {
    gravity * (pi[3] * q[0].sin() + pi[4] * (q[0] + q[1]).sin())
}

/// Negative log marginal likelihood evaluated through the dense data-space
/// covariance `V = Φ Σ₀ Φᵀ + σ² I`:
///
/// `L = ½ log det V + ½ yᵀ V⁻¹ y + (tn/2) log 2π`.
///
/// Costs O((tn)³); only usable on small problems, which is the point: the
/// production evaluator factorizes in weight space and must agree with this.
pub fn nll_dense(
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    prior_variance: &DVector<f64>,
    sigma2: f64,
) -> f64 {
    let tn = phi.nrows();
    assert_eq!(y.len(), tn);
    assert_eq!(prior_variance.len(), phi.ncols());
    assert!(sigma2 > 0.0);

    let mut v = phi * DMatrix::from_diagonal(prior_variance) * phi.transpose();
    for i in 0..tn {
        v[(i, i)] += sigma2;
    }
    let chol = v
        .cholesky()
        .expect("data-space covariance must be positive definite");
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let alpha = chol.solve(y);
    0.5 * logdet + 0.5 * y.dot(&alpha) + 0.5 * tn as f64 * (2.0 * std::f64::consts::PI).ln()
}
