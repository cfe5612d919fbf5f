//! The five torque-model variants in one linear-in-parameters form
//! `y = Φ(x)·θ + mean(x) + e`.
//!
//! - `P`: parametric rigid-body regression, `θ = π`, prior `γ²I`.
//! - `NP`: nonparametric random-feature regression, `θ = α`, prior `ρ²I`.
//! - `SP`/`SP2`: NP on the residual after subtracting a rigid-body mean
//!   `ψ(x)ᵀπ`; SP's `π` comes from marginal-likelihood profiling, SP2's from a
//!   preliminary least-squares fit. Both freeze `π` once estimated.
//! - `SPK`: joint estimation of `θ = [π; α]` with block prior
//!   `diag(γ²I, ρ²I)`.

use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{rbd_regressor, Dataset, JointState, ARM_BASE_PARAMS, ARM_JOINTS};
use crate::error::{Error, Result};
use crate::features::FeatureMap;

/// Tag selecting one of the five model constructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ModelVariant {
    P,
    Np,
    Sp,
    Sp2,
    Spk,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::P,
        ModelVariant::Np,
        ModelVariant::Sp,
        ModelVariant::Sp2,
        ModelVariant::Spk,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelVariant::P => "P",
            ModelVariant::Np => "NP",
            ModelVariant::Sp => "SP",
            ModelVariant::Sp2 => "SP2",
            ModelVariant::Spk => "SPK",
        }
    }

    /// Whether the variant carries a random-feature block.
    pub fn uses_features(&self) -> bool {
        !matches!(self, ModelVariant::P)
    }

    /// Whether predictions add a rigid-body mean term `ψ(x)ᵀπ`.
    pub fn has_mean(&self) -> bool {
        matches!(self, ModelVariant::Sp | ModelVariant::Sp2)
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P" => Ok(ModelVariant::P),
            "NP" => Ok(ModelVariant::Np),
            "SP" => Ok(ModelVariant::Sp),
            "SP2" => Ok(ModelVariant::Sp2),
            "SPK" => Ok(ModelVariant::Spk),
            _ => Err(Error::InvalidParameter(format!(
                "unknown model variant `{s}` (expected P, NP, SP, SP2 or SPK)"
            ))),
        }
    }
}

/// Variant-specific hyperparameters.
///
/// `gamma2` is the prior variance of the rigid-body parameters, `rho2` the
/// kernel scale, `tau2` the squared kernel width, `sigma2` the noise variance.
/// SP additionally carries its mean parameters `pi_mean`, SP2 its frozen
/// least-squares estimate `pi_hat`.
#[derive(Debug, Clone, PartialEq)]
pub enum Hyperparameters {
    P {
        gamma2: f64,
        sigma2: f64,
    },
    Np {
        rho2: f64,
        tau2: f64,
        sigma2: f64,
    },
    Sp {
        pi_mean: DVector<f64>,
        rho2: f64,
        tau2: f64,
        sigma2: f64,
    },
    Sp2 {
        pi_hat: DVector<f64>,
        rho2: f64,
        tau2: f64,
        sigma2: f64,
    },
    Spk {
        gamma2: f64,
        rho2: f64,
        tau2: f64,
        sigma2: f64,
    },
}

impl Hyperparameters {
    pub fn variant(&self) -> ModelVariant {
        match self {
            Hyperparameters::P { .. } => ModelVariant::P,
            Hyperparameters::Np { .. } => ModelVariant::Np,
            Hyperparameters::Sp { .. } => ModelVariant::Sp,
            Hyperparameters::Sp2 { .. } => ModelVariant::Sp2,
            Hyperparameters::Spk { .. } => ModelVariant::Spk,
        }
    }

    pub fn sigma2(&self) -> f64 {
        match self {
            Hyperparameters::P { sigma2, .. }
            | Hyperparameters::Np { sigma2, .. }
            | Hyperparameters::Sp { sigma2, .. }
            | Hyperparameters::Sp2 { sigma2, .. }
            | Hyperparameters::Spk { sigma2, .. } => *sigma2,
        }
    }

    pub fn gamma2(&self) -> Option<f64> {
        match self {
            Hyperparameters::P { gamma2, .. } | Hyperparameters::Spk { gamma2, .. } => {
                Some(*gamma2)
            }
            _ => None,
        }
    }

    pub fn rho2(&self) -> Option<f64> {
        match self {
            Hyperparameters::Np { rho2, .. }
            | Hyperparameters::Sp { rho2, .. }
            | Hyperparameters::Sp2 { rho2, .. }
            | Hyperparameters::Spk { rho2, .. } => Some(*rho2),
            Hyperparameters::P { .. } => None,
        }
    }

    pub fn tau2(&self) -> Option<f64> {
        match self {
            Hyperparameters::Np { tau2, .. }
            | Hyperparameters::Sp { tau2, .. }
            | Hyperparameters::Sp2 { tau2, .. }
            | Hyperparameters::Spk { tau2, .. } => Some(*tau2),
            Hyperparameters::P { .. } => None,
        }
    }

    /// Mean parameters for SP/SP2, if any.
    pub fn pi(&self) -> Option<&DVector<f64>> {
        match self {
            Hyperparameters::Sp { pi_mean, .. } => Some(pi_mean),
            Hyperparameters::Sp2 { pi_hat, .. } => Some(pi_hat),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!(
                    "{name} must be strictly positive and finite, got {v}"
                )))
            }
        };
        positive("sigma2", self.sigma2())?;
        if let Some(g) = self.gamma2() {
            positive("gamma2", g)?;
        }
        if let Some(r) = self.rho2() {
            positive("rho2", r)?;
        }
        if let Some(t) = self.tau2() {
            positive("tau2", t)?;
        }
        if let Some(pi) = self.pi() {
            if pi.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("mean parameters"));
            }
        }
        Ok(())
    }
}

/// A fully specified model: hyperparameters, feature map (for variants that
/// use one), and problem dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    hyper: Hyperparameters,
    feature_map: Option<FeatureMap>,
    n: usize,
    p_rbd: usize,
    gravity: f64,
}

impl ModelSpec {
    /// Assemble and validate a spec. For feature-bearing variants the map's
    /// lengthscale is reset to `sqrt(tau2)` so the two can never disagree.
    pub fn new(
        hyper: Hyperparameters,
        feature_map: Option<FeatureMap>,
        n: usize,
        p_rbd: usize,
        gravity: f64,
    ) -> Result<Self> {
        hyper.validate()?;
        if !gravity.is_finite() {
            return Err(Error::NonFinite("gravity"));
        }
        let variant = hyper.variant();
        if variant != ModelVariant::Np && (n != ARM_JOINTS || p_rbd != ARM_BASE_PARAMS) {
            return Err(Error::InvalidParameter(format!(
                "{variant} uses the two-link regressor and requires n={ARM_JOINTS}, \
                 p_rbd={ARM_BASE_PARAMS}; got n={n}, p_rbd={p_rbd}"
            )));
        }
        if n == 0 {
            return Err(Error::InvalidParameter("n must be positive".into()));
        }
        let feature_map =
            match (variant.uses_features(), feature_map) {
                (false, None) => None,
                (false, Some(_)) => {
                    return Err(Error::InvalidParameter(
                        "variant P takes no feature map".into(),
                    ))
                }
                (true, None) => {
                    return Err(Error::InvalidParameter(format!(
                        "variant {variant} requires a feature map"
                    )))
                }
                (true, Some(map)) => {
                    if map.input_dim() != 3 * n {
                        return Err(Error::DimensionMismatch {
                            expected: 3 * n,
                            got: map.input_dim(),
                            context: "feature map input",
                        });
                    }
                    Some(map.with_lengthscale(
                        hyper.tau2().expect("feature variants carry tau2").sqrt(),
                    )?)
                }
            };
        if let Some(pi) = hyper.pi() {
            if pi.len() != p_rbd {
                return Err(Error::DimensionMismatch {
                    expected: p_rbd,
                    got: pi.len(),
                    context: "mean parameter vector",
                });
            }
        }
        Ok(Self {
            hyper,
            feature_map,
            n,
            p_rbd,
            gravity,
        })
    }

    pub fn variant(&self) -> ModelVariant {
        self.hyper.variant()
    }

    pub fn hyper(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn feature_map(&self) -> Option<&FeatureMap> {
        self.feature_map.as_ref()
    }

    pub fn outputs(&self) -> usize {
        self.n
    }

    pub fn p_rbd(&self) -> usize {
        self.p_rbd
    }

    pub fn gravity(&self) -> f64 {
        self.gravity
    }

    /// Total parameter dimension of `θ`.
    pub fn p_theta(&self) -> usize {
        let feature_block = self
            .feature_map
            .as_ref()
            .map_or(0, |m| m.output_dim() * self.n);
        match self.variant() {
            ModelVariant::P => self.p_rbd,
            ModelVariant::Np | ModelVariant::Sp | ModelVariant::Sp2 => feature_block,
            ModelVariant::Spk => self.p_rbd + feature_block,
        }
    }
}

/// Per-sample design matrix `Φ(x) ∈ ℝ^{n×p_theta}`.
///
/// - P: `ψ(x)ᵀ`.
/// - NP/SP/SP2: `φ(x)ᵀ ⊗ I_n`; row `j` carries `φ_i` at column `i·n + j`.
/// - SPK: `[ψ(x)ᵀ | φ(x)ᵀ ⊗ I_n]`.
pub fn build_design(spec: &ModelSpec, x: &JointState) -> Result<DMatrix<f64>> {
    if x.joints() != spec.n {
        return Err(Error::DimensionMismatch {
            expected: spec.n,
            got: x.joints(),
            context: "design input",
        });
    }
    let n = spec.n;
    match spec.variant() {
        ModelVariant::P => Ok(rbd_regressor(x, spec.gravity)?.transpose()),
        ModelVariant::Np | ModelVariant::Sp | ModelVariant::Sp2 => {
            let phi = spec
                .feature_map()
                .expect("validated at construction")
                .features(&x.stacked())?;
            Ok(kron_with_identity(&phi, n))
        }
        ModelVariant::Spk => {
            let psi_t = rbd_regressor(x, spec.gravity)?.transpose();
            let phi = spec
                .feature_map()
                .expect("validated at construction")
                .features(&x.stacked())?;
            let kron = kron_with_identity(&phi, n);
            let mut design = DMatrix::zeros(n, spec.p_theta());
            design.columns_mut(0, spec.p_rbd).copy_from(&psi_t);
            design
                .columns_mut(spec.p_rbd, kron.ncols())
                .copy_from(&kron);
            Ok(design)
        }
    }
}

/// `φᵀ ⊗ I_n`: row `j` has `φ_i` at column `i·n + j`, zeros elsewhere.
fn kron_with_identity(phi: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, phi.len() * n);
    for (i, &v) in phi.iter().enumerate() {
        for j in 0..n {
            out[(j, i * n + j)] = v;
        }
    }
    out
}

/// Diagonal of the prior covariance `Σ₀ ∈ ℝ^{p_theta}`, strictly positive.
pub fn build_prior(spec: &ModelSpec) -> Result<DVector<f64>> {
    let p = spec.p_theta();
    let diag = match spec.variant() {
        ModelVariant::P => DVector::from_element(p, spec.hyper.gamma2().unwrap()),
        ModelVariant::Np | ModelVariant::Sp | ModelVariant::Sp2 => {
            DVector::from_element(p, spec.hyper.rho2().unwrap())
        }
        ModelVariant::Spk => {
            let gamma2 = spec.hyper.gamma2().unwrap();
            let rho2 = spec.hyper.rho2().unwrap();
            DVector::from_fn(p, |i, _| if i < spec.p_rbd { gamma2 } else { rho2 })
        }
    };
    Ok(diag)
}

/// Rigid-body mean `ψ(x)ᵀπ` for SP/SP2, zero for the other variants.
pub fn mean_term(spec: &ModelSpec, x: &JointState) -> Result<DVector<f64>> {
    match spec.hyper.pi() {
        Some(pi) => Ok(rbd_regressor(x, spec.gravity)?.transpose() * pi),
        None => Ok(DVector::zeros(spec.n)),
    }
}

/// Mean-corrected target `ỹ = y − ψ(x)ᵀπ` (identity for variants without a
/// mean). This is what the estimator must be fed for SP/SP2.
pub fn apply_mean(spec: &ModelSpec, x: &JointState, y: &DVector<f64>) -> Result<DVector<f64>> {
    if y.len() != spec.n {
        return Err(Error::DimensionMismatch {
            expected: spec.n,
            got: y.len(),
            context: "apply_mean target",
        });
    }
    Ok(y - mean_term(spec, x)?)
}

/// Least-squares estimate of the base parameters with rank diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PiEstimate {
    pub pi: DVector<f64>,
    pub rank: usize,
    pub cols: usize,
}

impl PiEstimate {
    pub fn is_full_rank(&self) -> bool {
        self.rank == self.cols
    }
}

/// Ordinary least squares `π̂ = argmin Σ_s ‖y_s − ψ(x_s)ᵀπ‖²` over a dataset.
///
/// Rank-deficient systems return the minimum-norm solution and log a warning;
/// the returned rank lets callers detect that case.
pub fn ls_estimate_pi(ds: &Dataset, gravity: f64) -> Result<PiEstimate> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t = ds.len();
    let n = ds.joints();
    let p = ARM_BASE_PARAMS;
    let mut stacked = DMatrix::zeros(t * n, p);
    let mut y = DVector::zeros(t * n);
    for (s, sample) in ds.samples().iter().enumerate() {
        let psi_t = rbd_regressor(&sample.state, gravity)?.transpose();
        stacked.rows_mut(s * n, n).copy_from(&psi_t);
        y.rows_mut(s * n, n).copy_from(&sample.torques);
    }
    let svd = stacked.svd(true, true);
    let sv_max = svd.singular_values.max();
    let eps = sv_max * (t * n).max(p) as f64 * f64::EPSILON;
    let rank = svd.rank(eps);
    if rank < p {
        log::warn!("regressor rank {rank} < {p}; returning the minimum-norm estimate");
    }
    let pi = svd
        .solve(&y, eps)
        .map_err(|e| Error::SingularSystem(e.to_string()))?;
    Ok(PiEstimate { pi, rank, cols: p })
}

/// On-disk model representation: everything needed to rebuild a [`ModelSpec`]
/// plus the estimated weights. Feature frequencies are regenerated from
/// `(feature_count, feature_seed)` rather than stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub variant: ModelVariant,
    pub joints: usize,
    pub rbd_params: usize,
    pub gravity: f64,
    pub sigma2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi: Option<Vec<f64>>,
    pub theta: Vec<f64>,
}

impl ModelFile {
    pub fn from_parts(spec: &ModelSpec, theta: &DVector<f64>) -> Result<Self> {
        if theta.len() != spec.p_theta() {
            return Err(Error::DimensionMismatch {
                expected: spec.p_theta(),
                got: theta.len(),
                context: "theta",
            });
        }
        Ok(ModelFile {
            variant: spec.variant(),
            joints: spec.n,
            rbd_params: spec.p_rbd,
            gravity: spec.gravity,
            sigma2: spec.hyper.sigma2(),
            gamma2: spec.hyper.gamma2(),
            rho2: spec.hyper.rho2(),
            tau2: spec.hyper.tau2(),
            feature_count: spec.feature_map().map(|m| m.num_frequencies()),
            feature_seed: spec.feature_map().map(|m| m.spec().seed),
            pi: spec.hyper.pi().map(|v| v.iter().copied().collect()),
            theta: theta.iter().copied().collect(),
        })
    }

    pub fn into_parts(self) -> Result<(ModelSpec, DVector<f64>)> {
        let missing = |field: &str, variant: ModelVariant| {
            Error::InvalidParameter(format!(
                "model file missing `{field}` for variant {variant}"
            ))
        };
        let v = self.variant;
        let hyper = match v {
            ModelVariant::P => Hyperparameters::P {
                gamma2: self.gamma2.ok_or_else(|| missing("gamma2", v))?,
                sigma2: self.sigma2,
            },
            ModelVariant::Np => Hyperparameters::Np {
                rho2: self.rho2.ok_or_else(|| missing("rho2", v))?,
                tau2: self.tau2.ok_or_else(|| missing("tau2", v))?,
                sigma2: self.sigma2,
            },
            ModelVariant::Sp => Hyperparameters::Sp {
                pi_mean: DVector::from_vec(self.pi.clone().ok_or_else(|| missing("pi", v))?),
                rho2: self.rho2.ok_or_else(|| missing("rho2", v))?,
                tau2: self.tau2.ok_or_else(|| missing("tau2", v))?,
                sigma2: self.sigma2,
            },
            ModelVariant::Sp2 => Hyperparameters::Sp2 {
                pi_hat: DVector::from_vec(self.pi.clone().ok_or_else(|| missing("pi", v))?),
                rho2: self.rho2.ok_or_else(|| missing("rho2", v))?,
                tau2: self.tau2.ok_or_else(|| missing("tau2", v))?,
                sigma2: self.sigma2,
            },
            ModelVariant::Spk => Hyperparameters::Spk {
                gamma2: self.gamma2.ok_or_else(|| missing("gamma2", v))?,
                rho2: self.rho2.ok_or_else(|| missing("rho2", v))?,
                tau2: self.tau2.ok_or_else(|| missing("tau2", v))?,
                sigma2: self.sigma2,
            },
        };
        let feature_map = if v.uses_features() {
            let d = self
                .feature_count
                .ok_or_else(|| missing("feature_count", v))?;
            let seed = self
                .feature_seed
                .ok_or_else(|| missing("feature_seed", v))?;
            let tau = hyper.tau2().expect("feature variants carry tau2").sqrt();
            Some(FeatureMap::sample(3 * self.joints, d, tau, seed)?)
        } else {
            None
        };
        let spec = ModelSpec::new(
            hyper,
            feature_map,
            self.joints,
            self.rbd_params,
            self.gravity,
        )?;
        let theta = DVector::from_vec(self.theta);
        if theta.len() != spec.p_theta() {
            return Err(Error::DimensionMismatch {
                expected: spec.p_theta(),
                got: theta.len(),
                context: "theta",
            });
        }
        Ok((spec, theta))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidParameter(format!("serializing model: {e}")))?;
        text.push('\n');
        crate::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}
