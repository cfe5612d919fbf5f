//! Hyperparameter estimation.
//!
//! The negative log marginal likelihood
//! `L = ½ log det V + ½ yᵀV⁻¹y + (tn/2) log 2π` with
//! `V = Φ Σ₀ Φᵀ + σ² I_{tn}` is evaluated entirely in weight space: with
//! `G = ΦᵀΦ`, `h = Φᵀy` and `B = I_p + (1/σ²) Σ₀^{1/2} G Σ₀^{1/2}`,
//!
//! `log det V = tn·log σ² + log det B` and
//! `yᵀV⁻¹y = (1/σ²)(yᵀy − (1/σ²)(Σ₀^{1/2}h)ᵀ B⁻¹ (Σ₀^{1/2}h))`,
//!
//! so the factorization is p×p regardless of how many samples went in. The
//! per-variant structure (shared feature Gram across output channels, rigid
//! body blocks) only affects how `G` and `h` are assembled.
//!
//! Two estimation strategies are provided: marginal-likelihood minimization
//! with a Nelder-Mead simplex in log-hyperparameter space (`fit_ml`), and a
//! validation-set grid search (`fit_vs`).

mod nelder_mead;

pub use nelder_mead::{minimize_nelder_mead, NelderMeadOptions, NelderMeadResult};

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{rbd_regressor, Dataset, ARM_BASE_PARAMS, ARM_JOINTS};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::models::{ls_estimate_pi, Hyperparameters, ModelVariant};

/// One evaluation of the negative log marginal likelihood, split into its
/// three summands (`value = logdet_term + quadratic_term + constant_term`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllEvaluation {
    pub value: f64,
    pub logdet_term: f64,
    pub quadratic_term: f64,
    pub constant_term: f64,
    /// Samples the evaluation used.
    pub t: usize,
}

/// Negative log marginal likelihood from sufficient statistics: `gram = ΦᵀΦ`,
/// `h = Φᵀy` and `y_sq = yᵀy` of the stacked (mean-corrected) data, under a
/// diagonal prior covariance. `tn` is the number of stacked scalar
/// observations.
pub fn nll_from_gram(
    gram: &DMatrix<f64>,
    h: &DVector<f64>,
    y_sq: f64,
    prior_variance: &DVector<f64>,
    sigma2: f64,
    tn: usize,
) -> Result<NllEvaluation> {
    let p = gram.nrows();
    if gram.ncols() != p || h.len() != p || prior_variance.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: gram.ncols().max(h.len()).max(prior_variance.len()),
            context: "gram statistics",
        });
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sigma2 must be strictly positive, got {sigma2}"
        )));
    }
    if prior_variance.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter(
            "prior variances must be strictly positive".into(),
        ));
    }
    let sqrt_d = prior_variance.map(f64::sqrt);
    let mut b = DMatrix::from_fn(p, p, |i, j| gram[(i, j)] * sqrt_d[i] * sqrt_d[j] / sigma2);
    for i in 0..p {
        b[(i, i)] += 1.0;
    }
    let chol = b.cholesky().ok_or_else(|| {
        Error::SingularSystem("weight-space likelihood matrix is not positive definite".into())
    })?;
    let logdet_b: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let g = DVector::from_fn(p, |i, _| sqrt_d[i] * h[i]);
    let quad_inner = g.dot(&chol.solve(&g));

    let logdet_term = 0.5 * (tn as f64 * sigma2.ln() + logdet_b);
    let quadratic_term = 0.5 / sigma2 * (y_sq - quad_inner / sigma2);
    let constant_term = 0.5 * tn as f64 * (2.0 * std::f64::consts::PI).ln();
    let value = logdet_term + quadratic_term + constant_term;
    if !value.is_finite() {
        return Err(Error::NonFinite("marginal likelihood"));
    }
    Ok(NllEvaluation {
        value,
        logdet_term,
        quadratic_term,
        constant_term,
        t: tn,
    })
}

/// Per-dataset caches shared by every likelihood evaluation: stacked targets,
/// rigid-body Gram blocks, and the frozen feature projections `Ω·x_s` (the
/// kernel width only rescales them, so they are computed once).
pub struct NllWorkspace {
    t: usize,
    n: usize,
    /// Targets as columns, `n×t`.
    y_cols: DMatrix<f64>,
    y_sq: f64,
    /// Per output channel `j`: `t×p_rbd` matrix with rows `ψ(x_s)[:,j]ᵀ`.
    psi_cols: Vec<DMatrix<f64>>,
    /// `Σ_s ψ_s ψ_sᵀ`.
    g_psi: DMatrix<f64>,
    /// `Σ_s ψ_s y_s`.
    h_psi: DVector<f64>,
    /// Unscaled projections `Ω·x_s` as columns, `d×t`.
    proj: Option<DMatrix<f64>>,
    num_freq: usize,
}

/// Feature-dependent blocks for one candidate kernel width.
struct FeatureBlocks {
    /// `Σ_s φ_s φ_sᵀ`.
    g_phi: DMatrix<f64>,
    /// `Σ_s φ_s y_sᵀ`, `2d×n`.
    h_phi: DMatrix<f64>,
    /// Per output channel `j`: `Σ_s φ_s ψ_s[:,j]ᵀ`, `2d×p_rbd`.
    cross: Vec<DMatrix<f64>>,
}

impl NllWorkspace {
    pub fn new(ds: &Dataset, gravity: f64, map: Option<&FeatureMap>) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let t = ds.len();
        let n = ds.joints();
        if n != ARM_JOINTS {
            return Err(Error::DimensionMismatch {
                expected: ARM_JOINTS,
                got: n,
                context: "likelihood workspace joints",
            });
        }
        let p_rbd = ARM_BASE_PARAMS;

        let mut y_cols = DMatrix::zeros(n, t);
        let mut psi_cols = vec![DMatrix::zeros(t, p_rbd); n];
        let mut x_cols = DMatrix::zeros(3 * n, t);
        for (s, sample) in ds.samples().iter().enumerate() {
            y_cols.column_mut(s).copy_from(&sample.torques);
            x_cols.column_mut(s).copy_from(&sample.state.stacked());
            let psi = rbd_regressor(&sample.state, gravity)?; // p_rbd×n
            for j in 0..n {
                for a in 0..p_rbd {
                    psi_cols[j][(s, a)] = psi[(a, j)];
                }
            }
        }
        let y_sq = y_cols.iter().map(|v| v * v).sum();
        let mut g_psi = DMatrix::zeros(p_rbd, p_rbd);
        let mut h_psi = DVector::zeros(p_rbd);
        for (j, psi_col) in psi_cols.iter().enumerate() {
            g_psi += psi_col.transpose() * psi_col;
            h_psi += psi_col.transpose() * y_cols.row(j).transpose();
        }
        let (proj, num_freq) = match map {
            Some(m) => {
                if m.input_dim() != 3 * n {
                    return Err(Error::DimensionMismatch {
                        expected: 3 * n,
                        got: m.input_dim(),
                        context: "feature map input",
                    });
                }
                (Some(m.omega() * &x_cols), m.num_frequencies())
            }
            None => (None, 0),
        };
        Ok(Self {
            t,
            n,
            y_cols,
            y_sq,
            psi_cols,
            g_psi,
            h_psi,
            proj,
            num_freq,
        })
    }

    pub fn samples(&self) -> usize {
        self.t
    }

    fn feature_blocks(&self, tau2: f64, need_cross: bool) -> Result<FeatureBlocks> {
        let proj = self.proj.as_ref().ok_or_else(|| {
            Error::InvalidParameter("workspace was built without a feature map".into())
        })?;
        if !(tau2 > 0.0 && tau2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "tau2 must be strictly positive, got {tau2}"
            )));
        }
        let tau = tau2.sqrt();
        let d = self.num_freq;
        let scale = 1.0 / (d as f64).sqrt();
        let mut f = DMatrix::zeros(2 * d, self.t);
        for s in 0..self.t {
            for i in 0..d {
                let arg = proj[(i, s)] / tau;
                f[(i, s)] = scale * arg.cos();
                f[(d + i, s)] = scale * arg.sin();
            }
        }
        let g_phi = &f * f.transpose();
        let h_phi = &f * self.y_cols.transpose();
        let cross = if need_cross {
            self.psi_cols.iter().map(|pj| &f * pj).collect()
        } else {
            Vec::new()
        };
        Ok(FeatureBlocks {
            g_phi,
            h_phi,
            cross,
        })
    }

    /// Likelihood of the parametric variant.
    fn eval_p(&self, gamma2: f64, sigma2: f64) -> Result<NllEvaluation> {
        nll_from_gram(
            &self.g_psi,
            &self.h_psi,
            self.y_sq,
            &DVector::from_element(ARM_BASE_PARAMS, gamma2),
            sigma2,
            self.t * self.n,
        )
    }

    /// Likelihood of the feature-only variants; `pi` mean-corrects the
    /// targets first (SP/SP2).
    fn eval_feature(
        &self,
        blocks: &FeatureBlocks,
        pi: Option<&DVector<f64>>,
        rho2: f64,
        sigma2: f64,
    ) -> Result<NllEvaluation> {
        let (n, two_d) = (self.n, 2 * self.num_freq);
        let (h_eff, y_sq_eff) = self.corrected_targets(blocks, pi)?;
        let p = two_d * n;
        let mut gram = DMatrix::zeros(p, p);
        for i in 0..two_d {
            for i2 in 0..two_d {
                let v = blocks.g_phi[(i, i2)];
                for j in 0..n {
                    gram[(i * n + j, i2 * n + j)] = v;
                }
            }
        }
        let mut h = DVector::zeros(p);
        for i in 0..two_d {
            for j in 0..n {
                h[i * n + j] = h_eff[(i, j)];
            }
        }
        nll_from_gram(
            &gram,
            &h,
            y_sq_eff,
            &DVector::from_element(p, rho2),
            sigma2,
            self.t * n,
        )
    }

    /// Mean-corrected `Σφỹᵀ` and `ỹᵀỹ` for a fixed rigid-body mean.
    fn corrected_targets(
        &self,
        blocks: &FeatureBlocks,
        pi: Option<&DVector<f64>>,
    ) -> Result<(DMatrix<f64>, f64)> {
        match pi {
            None => Ok((blocks.h_phi.clone(), self.y_sq)),
            Some(pi) => {
                if pi.len() != ARM_BASE_PARAMS {
                    return Err(Error::DimensionMismatch {
                        expected: ARM_BASE_PARAMS,
                        got: pi.len(),
                        context: "mean parameters",
                    });
                }
                if blocks.cross.len() != self.n {
                    return Err(Error::InvalidParameter(
                        "feature blocks were built without cross terms".into(),
                    ));
                }
                let mut h = blocks.h_phi.clone();
                for j in 0..self.n {
                    let correction = &blocks.cross[j] * pi;
                    let mut col = h.column_mut(j);
                    col -= &correction;
                }
                // ỹᵀỹ = yᵀy − 2πᵀ(Σψy) + πᵀ(Σψψᵀ)π
                let y_sq = self.y_sq - 2.0 * pi.dot(&self.h_psi)
                    + (pi.transpose() * &self.g_psi * pi)[(0, 0)];
                Ok((h, y_sq))
            }
        }
    }

    /// Likelihood of the joint variant with prior `diag(γ²I, ρ²I)`.
    fn eval_joint(
        &self,
        blocks: &FeatureBlocks,
        gamma2: f64,
        rho2: f64,
        sigma2: f64,
    ) -> Result<NllEvaluation> {
        let (n, two_d, p_rbd) = (self.n, 2 * self.num_freq, ARM_BASE_PARAMS);
        if blocks.cross.len() != n {
            return Err(Error::InvalidParameter(
                "feature blocks were built without cross terms".into(),
            ));
        }
        let p = p_rbd + two_d * n;
        let mut gram = DMatrix::zeros(p, p);
        gram.view_mut((0, 0), (p_rbd, p_rbd)).copy_from(&self.g_psi);
        for j in 0..n {
            let aj = &blocks.cross[j]; // 2d×p_rbd
            for i in 0..two_d {
                for a in 0..p_rbd {
                    let v = aj[(i, a)];
                    gram[(a, p_rbd + i * n + j)] = v;
                    gram[(p_rbd + i * n + j, a)] = v;
                }
            }
        }
        for i in 0..two_d {
            for i2 in 0..two_d {
                let v = blocks.g_phi[(i, i2)];
                for j in 0..n {
                    gram[(p_rbd + i * n + j, p_rbd + i2 * n + j)] = v;
                }
            }
        }
        let mut h = DVector::zeros(p);
        h.rows_mut(0, p_rbd).copy_from(&self.h_psi);
        for i in 0..two_d {
            for j in 0..n {
                h[p_rbd + i * n + j] = blocks.h_phi[(i, j)];
            }
        }
        let prior = DVector::from_fn(p, |i, _| if i < p_rbd { gamma2 } else { rho2 });
        nll_from_gram(&gram, &h, self.y_sq, &prior, sigma2, self.t * n)
    }

    /// Evaluate the likelihood for any fully specified hyperparameter set.
    pub fn evaluate(&self, hyper: &Hyperparameters) -> Result<NllEvaluation> {
        hyper.validate()?;
        match hyper {
            Hyperparameters::P { gamma2, sigma2 } => self.eval_p(*gamma2, *sigma2),
            Hyperparameters::Np { rho2, tau2, sigma2 } => {
                let blocks = self.feature_blocks(*tau2, false)?;
                self.eval_feature(&blocks, None, *rho2, *sigma2)
            }
            Hyperparameters::Sp {
                pi_mean,
                rho2,
                tau2,
                sigma2,
            } => {
                let blocks = self.feature_blocks(*tau2, true)?;
                self.eval_feature(&blocks, Some(pi_mean), *rho2, *sigma2)
            }
            Hyperparameters::Sp2 {
                pi_hat,
                rho2,
                tau2,
                sigma2,
            } => {
                let blocks = self.feature_blocks(*tau2, true)?;
                self.eval_feature(&blocks, Some(pi_hat), *rho2, *sigma2)
            }
            Hyperparameters::Spk {
                gamma2,
                rho2,
                tau2,
                sigma2,
            } => {
                let blocks = self.feature_blocks(*tau2, true)?;
                self.eval_joint(&blocks, *gamma2, *rho2, *sigma2)
            }
        }
    }

    /// Closed-form generalized-least-squares mean parameters
    /// `π̂ = (ΨᵀV⁻¹Ψ)⁻¹ΨᵀV⁻¹y` under the feature covariance
    /// `V = ρ²Φ_αΦ_αᵀ + σ²I`, via the shared 2d×2d factorization.
    pub fn profile_pi(&self, rho2: f64, tau2: f64, sigma2: f64) -> Result<DVector<f64>> {
        let blocks = self.feature_blocks(tau2, true)?;
        self.profile_pi_with(&blocks, rho2, sigma2)
    }

    fn profile_pi_with(
        &self,
        blocks: &FeatureBlocks,
        rho2: f64,
        sigma2: f64,
    ) -> Result<DVector<f64>> {
        if !(rho2 > 0.0 && sigma2 > 0.0) {
            return Err(Error::InvalidParameter(
                "rho2 and sigma2 must be strictly positive".into(),
            ));
        }
        let two_d = 2 * self.num_freq;
        let ratio = rho2 / sigma2;
        let mut bphi = &blocks.g_phi * ratio;
        for i in 0..two_d {
            bphi[(i, i)] += 1.0;
        }
        let chol = bphi.cholesky().ok_or_else(|| {
            Error::SingularSystem("feature covariance factorization failed".into())
        })?;
        // σ²·ΨᵀV⁻¹Ψ and σ²·ΨᵀV⁻¹y (the common 1/σ² cancels in the solve)
        let mut lhs = self.g_psi.clone();
        let mut rhs = self.h_psi.clone();
        for j in 0..self.n {
            let aj = &blocks.cross[j];
            let solved = chol.solve(aj);
            lhs -= aj.transpose() * &solved * ratio;
            let hj = blocks.h_phi.column(j).into_owned();
            rhs -= aj.transpose() * chol.solve(&hj) * ratio;
        }
        lhs.cholesky()
            .ok_or_else(|| {
                Error::SingularSystem(
                    "mean parameters are not identifiable from this window".into(),
                )
            })
            .map(|c| c.solve(&rhs))
    }

    /// Profile the mean parameters, then evaluate the likelihood at them.
    fn eval_profiled(
        &self,
        rho2: f64,
        tau2: f64,
        sigma2: f64,
    ) -> Result<(NllEvaluation, DVector<f64>)> {
        let blocks = self.feature_blocks(tau2, true)?;
        let pi = self.profile_pi_with(&blocks, rho2, sigma2)?;
        let ev = self.eval_feature(&blocks, Some(&pi), rho2, sigma2)?;
        Ok((ev, pi))
    }
}

/// `nll(spec, ds)` convenience wrapper: build a one-shot workspace and
/// evaluate the spec's hyperparameters.
pub fn nll(spec: &crate::models::ModelSpec, ds: &Dataset) -> Result<NllEvaluation> {
    let ws = NllWorkspace::new(ds, spec.gravity(), spec.feature_map())?;
    ws.evaluate(spec.hyper())
}

/// Result of a marginal-likelihood fit.
#[derive(Debug, Clone)]
pub struct MlFit {
    pub hyper: Hyperparameters,
    pub nll: f64,
    pub iterations: usize,
    /// Best objective value before the first simplex step and after each one.
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Minimize the negative log marginal likelihood over the variant's
/// hyperparameters in log space, starting from `init` (whose variant must
/// match). SP profiles its mean parameters in closed form inside every
/// evaluation; SP2 keeps the `pi_hat` carried by `init` fixed throughout.
pub fn fit_ml(
    variant: ModelVariant,
    init_ds: &Dataset,
    map: Option<&FeatureMap>,
    init: &Hyperparameters,
    gravity: f64,
) -> Result<MlFit> {
    if init.variant() != variant {
        return Err(Error::InvalidParameter(format!(
            "initial hyperparameters are for {}, not {variant}",
            init.variant()
        )));
    }
    init.validate()?;
    if variant.uses_features() && map.is_none() {
        return Err(Error::InvalidParameter(format!(
            "variant {variant} requires a feature map"
        )));
    }
    let ws = NllWorkspace::new(init_ds, gravity, map)?;
    let options = NelderMeadOptions::default();

    let finite = |r: Result<NllEvaluation>| r.map_or(f64::INFINITY, |e| e.value);

    match init {
        Hyperparameters::P { gamma2, sigma2 } => {
            let x0 = DVector::from_row_slice(&[gamma2.ln(), sigma2.ln()]);
            let res =
                minimize_nelder_mead(|z| finite(ws.eval_p(z[0].exp(), z[1].exp())), &x0, &options)?;
            Ok(MlFit {
                hyper: Hyperparameters::P {
                    gamma2: res.x[0].exp(),
                    sigma2: res.x[1].exp(),
                },
                nll: res.value,
                iterations: res.iterations,
                trace: res.trace,
                converged: res.converged,
            })
        }
        Hyperparameters::Np { rho2, tau2, sigma2 } => {
            let x0 = DVector::from_row_slice(&[rho2.ln(), tau2.ln(), sigma2.ln()]);
            let res = minimize_nelder_mead(
                |z| {
                    finite(
                        ws.feature_blocks(z[1].exp(), false)
                            .and_then(|b| ws.eval_feature(&b, None, z[0].exp(), z[2].exp())),
                    )
                },
                &x0,
                &options,
            )?;
            Ok(MlFit {
                hyper: Hyperparameters::Np {
                    rho2: res.x[0].exp(),
                    tau2: res.x[1].exp(),
                    sigma2: res.x[2].exp(),
                },
                nll: res.value,
                iterations: res.iterations,
                trace: res.trace,
                converged: res.converged,
            })
        }
        Hyperparameters::Sp {
            rho2, tau2, sigma2, ..
        } => {
            let x0 = DVector::from_row_slice(&[rho2.ln(), tau2.ln(), sigma2.ln()]);
            let res = minimize_nelder_mead(
                |z| {
                    finite(
                        ws.eval_profiled(z[0].exp(), z[1].exp(), z[2].exp())
                            .map(|(e, _)| e),
                    )
                },
                &x0,
                &options,
            )?;
            let (rho2, tau2, sigma2) = (res.x[0].exp(), res.x[1].exp(), res.x[2].exp());
            let (_, pi_mean) = ws.eval_profiled(rho2, tau2, sigma2)?;
            Ok(MlFit {
                hyper: Hyperparameters::Sp {
                    pi_mean,
                    rho2,
                    tau2,
                    sigma2,
                },
                nll: res.value,
                iterations: res.iterations,
                trace: res.trace,
                converged: res.converged,
            })
        }
        Hyperparameters::Sp2 {
            pi_hat,
            rho2,
            tau2,
            sigma2,
        } => {
            let x0 = DVector::from_row_slice(&[rho2.ln(), tau2.ln(), sigma2.ln()]);
            let res =
                minimize_nelder_mead(
                    |z| {
                        finite(ws.feature_blocks(z[1].exp(), true).and_then(|b| {
                            ws.eval_feature(&b, Some(pi_hat), z[0].exp(), z[2].exp())
                        }))
                    },
                    &x0,
                    &options,
                )?;
            Ok(MlFit {
                hyper: Hyperparameters::Sp2 {
                    pi_hat: pi_hat.clone(),
                    rho2: res.x[0].exp(),
                    tau2: res.x[1].exp(),
                    sigma2: res.x[2].exp(),
                },
                nll: res.value,
                iterations: res.iterations,
                trace: res.trace,
                converged: res.converged,
            })
        }
        Hyperparameters::Spk {
            gamma2,
            rho2,
            tau2,
            sigma2,
        } => {
            let x0 = DVector::from_row_slice(&[gamma2.ln(), rho2.ln(), tau2.ln(), sigma2.ln()]);
            let res = minimize_nelder_mead(
                |z| {
                    finite(
                        ws.feature_blocks(z[2].exp(), true)
                            .and_then(|b| ws.eval_joint(&b, z[0].exp(), z[1].exp(), z[3].exp())),
                    )
                },
                &x0,
                &options,
            )?;
            Ok(MlFit {
                hyper: Hyperparameters::Spk {
                    gamma2: res.x[0].exp(),
                    rho2: res.x[1].exp(),
                    tau2: res.x[2].exp(),
                    sigma2: res.x[3].exp(),
                },
                nll: res.value,
                iterations: res.iterations,
                trace: res.trace,
                converged: res.converged,
            })
        }
    }
}

/// Ordered list of hyperparameter candidates for the validation-set search.
#[derive(Debug, Clone)]
pub struct HyperGrid {
    pub candidates: Vec<Hyperparameters>,
}

impl HyperGrid {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Default 7×7 grid: kernel widths log-spaced over
    /// `[10⁻¹, 10²]·median‖xᵢ−xⱼ‖²` of the training window, and
    /// regularization ratios `λ = σ²/ρ²` log-spaced over `[10⁻⁶, 10⁰]`, with
    /// the noise variance point-estimated from a parametric residual fit.
    /// Ordered width-major, ratio-minor, both ascending.
    ///
    /// Available for NP and SP2 (SP2 candidates embed the training window's
    /// least-squares mean estimate).
    pub fn default_for(variant: ModelVariant, train: &Dataset, gravity: f64) -> Result<HyperGrid> {
        if !matches!(variant, ModelVariant::Np | ModelVariant::Sp2) {
            return Err(Error::InvalidParameter(format!(
                "no default validation grid for variant {variant}"
            )));
        }
        let m2 = median_pairwise_sq_distance(train, 500)?;
        let sigma2 = parametric_residual_variance(train, gravity)?;
        let pi_hat = match variant {
            ModelVariant::Sp2 => Some(ls_estimate_pi(train, gravity)?.pi),
            _ => None,
        };
        let mut candidates = Vec::with_capacity(49);
        for i in 0..7 {
            let tau2 = m2 * 10f64.powf(-1.0 + 0.5 * i as f64);
            for j in 0..7 {
                let lambda = 10f64.powi(j - 6);
                let rho2 = sigma2 / lambda;
                candidates.push(match &pi_hat {
                    None => Hyperparameters::Np { rho2, tau2, sigma2 },
                    Some(pi) => Hyperparameters::Sp2 {
                        pi_hat: pi.clone(),
                        rho2,
                        tau2,
                        sigma2,
                    },
                });
            }
        }
        Ok(HyperGrid { candidates })
    }
}

/// Result of a validation-set fit.
#[derive(Debug, Clone)]
pub struct VsFit {
    pub hyper: Hyperparameters,
    pub val_mse: f64,
    pub selected_index: usize,
    /// Validation MSE of every candidate, in grid order.
    pub candidate_mse: Vec<f64>,
}

/// Grid search: fit each candidate on `train` by regularized least squares,
/// score it by mean squared prediction error on `val`, return the argmin
/// (ties broken by earliest grid index).
pub fn fit_vs(
    variant: ModelVariant,
    train: &Dataset,
    val: &Dataset,
    map: Option<&FeatureMap>,
    grid: &HyperGrid,
    gravity: f64,
) -> Result<VsFit> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter(
            "validation grid has no candidates".into(),
        ));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for cand in &grid.candidates {
        if cand.variant() != variant {
            return Err(Error::InvalidParameter(format!(
                "grid candidate for {} in a {variant} search",
                cand.variant()
            )));
        }
        cand.validate()?;
    }
    if variant.uses_features() && map.is_none() {
        return Err(Error::InvalidParameter(format!(
            "variant {variant} requires a feature map"
        )));
    }
    if !variant.uses_features() || variant == ModelVariant::Spk {
        return Err(Error::InvalidParameter(format!(
            "validation-set search is implemented for NP, SP and SP2, not {variant}"
        )));
    }

    let ws = NllWorkspace::new(train, gravity, map)?;
    let map = map.expect("checked above");

    // validation-side caches: projections and stacked targets
    let t_val = val.len();
    let n = val.joints();
    let mut x_val = DMatrix::zeros(3 * n, t_val);
    let mut y_val = DMatrix::zeros(n, t_val);
    let mut psi_val = Vec::with_capacity(t_val);
    for (s, sample) in val.samples().iter().enumerate() {
        x_val.column_mut(s).copy_from(&sample.state.stacked());
        y_val.column_mut(s).copy_from(&sample.torques);
        psi_val.push(rbd_regressor(&sample.state, gravity)?);
    }
    let proj_val = map.omega() * x_val;
    let d = map.num_frequencies();

    let mut blocks_cache: HashMap<u64, FeatureBlocks> = HashMap::new();
    let mut fval_cache: HashMap<u64, DMatrix<f64>> = HashMap::new();
    let mut candidate_mse = Vec::with_capacity(grid.len());
    for cand in &grid.candidates {
        let tau2 = cand.tau2().expect("feature variant");
        let rho2 = cand.rho2().expect("feature variant");
        let sigma2 = cand.sigma2();
        let key = tau2.to_bits();
        if let std::collections::hash_map::Entry::Vacant(slot) = blocks_cache.entry(key) {
            slot.insert(ws.feature_blocks(tau2, cand.pi().is_some())?);
        }
        let blocks = &blocks_cache[&key];
        // train-side ridge solution per output channel:
        // ((σ²/ρ²)I + Gφ) W = Σφỹᵀ
        let lambda = sigma2 / rho2;
        let (h_eff, _) = ws.corrected_targets(blocks, cand.pi())?;
        let mut a = blocks.g_phi.clone();
        for i in 0..2 * d {
            a[(i, i)] += lambda;
        }
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::SingularSystem("ridge system is not positive definite".into()))?;
        let w = chol.solve(&h_eff); // 2d×n

        let f_val = fval_cache.entry(key).or_insert_with(|| {
            let tau = tau2.sqrt();
            let scale = 1.0 / (d as f64).sqrt();
            DMatrix::from_fn(2 * d, t_val, |i, s| {
                let arg = proj_val[(i % d, s)] / tau;
                if i < d {
                    scale * arg.cos()
                } else {
                    scale * arg.sin()
                }
            })
        });
        let mut yhat = w.transpose() * &*f_val; // n×t_val
        if let Some(pi) = cand.pi() {
            for (s, psi) in psi_val.iter().enumerate() {
                let mean = psi.transpose() * pi;
                let mut col = yhat.column_mut(s);
                col += &mean;
            }
        }
        let mse = (&yhat - &y_val).norm_squared() / t_val as f64;
        candidate_mse.push(mse);
    }

    let mut selected_index = 0;
    for (i, &mse) in candidate_mse.iter().enumerate() {
        if mse < candidate_mse[selected_index] {
            selected_index = i;
        }
    }
    Ok(VsFit {
        hyper: grid.candidates[selected_index].clone(),
        val_mse: candidate_mse[selected_index],
        selected_index,
        candidate_mse,
    })
}

/// Default starting hyperparameters for the simplex search: noise from a
/// parametric residual fit, kernel width from the median pairwise squared
/// distance, unit prior variance on the rigid-body block.
pub fn default_init(variant: ModelVariant, ds: &Dataset, gravity: f64) -> Result<Hyperparameters> {
    let sigma2 = parametric_residual_variance(ds, gravity)?;
    match variant {
        ModelVariant::P => Ok(Hyperparameters::P {
            gamma2: 1.0,
            sigma2,
        }),
        _ => {
            let tau2 = median_pairwise_sq_distance(ds, 500)?;
            let rho2 = sigma2;
            match variant {
                ModelVariant::Np => Ok(Hyperparameters::Np { rho2, tau2, sigma2 }),
                ModelVariant::Sp => Ok(Hyperparameters::Sp {
                    pi_mean: DVector::zeros(ARM_BASE_PARAMS),
                    rho2,
                    tau2,
                    sigma2,
                }),
                ModelVariant::Sp2 => Ok(Hyperparameters::Sp2 {
                    pi_hat: ls_estimate_pi(ds, gravity)?.pi,
                    rho2,
                    tau2,
                    sigma2,
                }),
                ModelVariant::Spk => Ok(Hyperparameters::Spk {
                    gamma2: 1.0,
                    rho2,
                    tau2,
                    sigma2,
                }),
                ModelVariant::P => unreachable!(),
            }
        }
    }
}

/// Median of `‖xᵢ − xⱼ‖²` over the stacked input locations, computed on an
/// evenly strided subsample of at most `max_points` samples.
pub fn median_pairwise_sq_distance(ds: &Dataset, max_points: usize) -> Result<f64> {
    if ds.len() < 2 {
        return Err(Error::InvalidParameter(
            "need at least two samples for a distance scale".into(),
        ));
    }
    let stride = ds.len().div_ceil(max_points.max(2));
    let points: Vec<DVector<f64>> = ds
        .samples()
        .iter()
        .step_by(stride)
        .map(|s| s.state.stacked())
        .collect();
    let mut dists = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for (i, a) in points.iter().enumerate() {
        for b in points.iter().skip(i + 1) {
            dists.push((a - b).norm_squared());
        }
    }
    let mid = dists.len() / 2;
    let (_, median, _) = dists.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    Ok(*median)
}

/// Noise variance point estimate: mean squared residual of an ordinary
/// least-squares rigid-body fit, corrected for the 5 fitted parameters.
pub fn parametric_residual_variance(ds: &Dataset, gravity: f64) -> Result<f64> {
    let est = ls_estimate_pi(ds, gravity)?;
    let mut sq = 0.0;
    let mut count = 0usize;
    for sample in ds.samples() {
        let r = &sample.torques - rbd_regressor(&sample.state, gravity)?.transpose() * &est.pi;
        sq += r.norm_squared();
        count += r.len();
    }
    let dof = count.saturating_sub(ARM_BASE_PARAMS).max(1);
    Ok((sq / dof as f64).max(1e-10))
}

/// Summary of one fit, serialized by the command-line driver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub variant: ModelVariant,
    pub method: String,
    pub final_value: f64,
    pub iterations: usize,
    /// NLL trace (ML) or per-candidate validation MSE (VS).
    pub trace: Vec<f64>,
    pub elapsed_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau2: Option<f64>,
    pub sigma2: f64,
}

impl FitReport {
    pub fn from_ml(fit: &MlFit, elapsed_seconds: f64) -> Self {
        FitReport {
            variant: fit.hyper.variant(),
            method: "ml".into(),
            final_value: fit.nll,
            iterations: fit.iterations,
            trace: fit.trace.clone(),
            elapsed_seconds,
            gamma2: fit.hyper.gamma2(),
            rho2: fit.hyper.rho2(),
            tau2: fit.hyper.tau2(),
            sigma2: fit.hyper.sigma2(),
        }
    }

    pub fn from_vs(fit: &VsFit, elapsed_seconds: f64) -> Self {
        FitReport {
            variant: fit.hyper.variant(),
            method: "vs".into(),
            final_value: fit.val_mse,
            iterations: fit.candidate_mse.len(),
            trace: fit.candidate_mse.clone(),
            elapsed_seconds,
            gamma2: fit.hyper.gamma2(),
            rho2: fit.hyper.rho2(),
            tau2: fit.hyper.tau2(),
            sigma2: fit.hyper.sigma2(),
        }
    }
}
