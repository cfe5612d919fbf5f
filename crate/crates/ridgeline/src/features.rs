//! Random Fourier features approximating the Gaussian kernel
//! `k(x, x′) = exp(−‖x − x′‖²/2τ²)`.
//!
//! The frequency matrix `Ω` is drawn once from a standard normal and frozen;
//! changing the lengthscale `τ` only rescales the projections, so candidate
//! lengthscales are compared under common random numbers.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A frozen set of random frequencies with its lengthscale.
///
/// The map is `φ(x) = (1/√d)·[cos(ω₁ᵀx/τ), …, cos(ω_dᵀx/τ), sin(ω₁ᵀx/τ), …,
/// sin(ω_dᵀx/τ)] ∈ ℝ^{2d}`, which satisfies `‖φ(x)‖² = 1` exactly and
/// `E[φ(x)ᵀφ(x′)] = k(x, x′)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    omega: DMatrix<f64>,
    lengthscale: f64,
    seed: u64,
}

/// Serialized form of a [`FeatureMap`]: the frequencies are regenerated from
/// `(input_dim, num_frequencies, seed)` rather than stored.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMapSpec {
    pub input_dim: usize,
    pub num_frequencies: usize,
    pub seed: u64,
    pub lengthscale: f64,
}

impl FeatureMap {
    /// Draw `num_frequencies` i.i.d. standard-normal rows `ωₖᵀ ∈ ℝ^{input_dim}`
    /// deterministically from `seed`.
    pub fn sample(
        input_dim: usize,
        num_frequencies: usize,
        lengthscale: f64,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || num_frequencies == 0 {
            return Err(Error::InvalidParameter(format!(
                "feature map needs positive dimensions, got {input_dim}×{num_frequencies}"
            )));
        }
        check_lengthscale(lengthscale)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // row-major fill so each frequency vector is drawn contiguously
        let rows: Vec<f64> = (0..num_frequencies * input_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Self {
            omega: DMatrix::from_row_slice(num_frequencies, input_dim, &rows),
            lengthscale,
            seed,
        })
    }

    pub fn from_spec(spec: &FeatureMapSpec) -> Result<Self> {
        Self::sample(
            spec.input_dim,
            spec.num_frequencies,
            spec.lengthscale,
            spec.seed,
        )
    }

    pub fn spec(&self) -> FeatureMapSpec {
        FeatureMapSpec {
            input_dim: self.input_dim(),
            num_frequencies: self.num_frequencies(),
            seed: self.seed,
            lengthscale: self.lengthscale,
        }
    }

    /// Raw frequency matrix (rows are the `ωₖᵀ`), before lengthscale division.
    pub(crate) fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn input_dim(&self) -> usize {
        self.omega.ncols()
    }

    /// Number of frequency vectors `d`; the feature vector has length `2d`.
    pub fn num_frequencies(&self) -> usize {
        self.omega.nrows()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.num_frequencies()
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    /// Same frozen frequencies, different lengthscale.
    pub fn with_lengthscale(&self, lengthscale: f64) -> Result<Self> {
        check_lengthscale(lengthscale)?;
        Ok(Self {
            lengthscale,
            ..self.clone()
        })
    }

    /// Evaluate `φ(x) ∈ ℝ^{2d}`.
    pub fn features(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
                context: "feature input",
            });
        }
        let d = self.num_frequencies();
        let proj = &self.omega * x / self.lengthscale;
        let scale = 1.0 / (d as f64).sqrt();
        let mut phi = DVector::zeros(2 * d);
        for k in 0..d {
            phi[k] = scale * proj[k].cos();
            phi[d + k] = scale * proj[k].sin();
        }
        Ok(phi)
    }

    /// Exact Gaussian kernel value this map approximates.
    pub fn kernel_exact(&self, x: &DVector<f64>, z: &DVector<f64>) -> Result<f64> {
        if x.len() != self.input_dim() || z.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len().max(z.len()),
                context: "kernel input",
            });
        }
        let d2 = (x - z).norm_squared();
        Ok((-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp())
    }
}

fn check_lengthscale(lengthscale: f64) -> Result<()> {
    if !(lengthscale > 0.0 && lengthscale.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "lengthscale must be strictly positive, got {lengthscale}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
        DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn features_have_unit_norm() {
        let map = FeatureMap::sample(6, 64, 1.3, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = random_input(&mut rng, 6);
            let phi = map.features(&x).unwrap();
            assert!((phi.norm_squared() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_of_identical_points_is_one() {
        let map = FeatureMap::sample(6, 8, 0.9, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_input(&mut rng, 6);
        assert_eq!(map.kernel_exact(&x, &x).unwrap(), 1.0);
        // and the feature approximation is exact on the diagonal
        let phi = map.features(&x).unwrap();
        assert!((phi.dot(&phi) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_decays_with_distance() {
        let map = FeatureMap::sample(2, 8, 1.0, 0).unwrap();
        let x = DVector::from_row_slice(&[0.0, 0.0]);
        let z = DVector::from_row_slice(&[3.0, 4.0]);
        // ‖x−z‖² = 25, τ = 1 ⇒ k = e^{−12.5}
        let k = map.kernel_exact(&x, &z).unwrap();
        assert!((k - (-12.5f64).exp()).abs() < 1e-18);
    }

    #[test]
    fn feature_inner_products_approximate_the_kernel() {
        // Monte Carlo error is O(1/√d): with d = 4096 pairwise errors
        // should sit well below 0.05.
        let map = FeatureMap::sample(6, 4096, 1.1, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points: Vec<_> = (0..10).map(|_| random_input(&mut rng, 6)).collect();
        let mut worst = 0.0f64;
        for a in &points {
            for b in &points {
                let approx = map.features(a).unwrap().dot(&map.features(b).unwrap());
                let exact = map.kernel_exact(a, b).unwrap();
                worst = worst.max((approx - exact).abs());
            }
        }
        assert!(worst < 0.05, "worst pairwise error {worst}");
    }

    #[test]
    fn error_shrinks_as_frequencies_grow() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let points: Vec<_> = (0..12).map(|_| random_input(&mut rng, 6)).collect();
        let rms = |d: usize| {
            let map = FeatureMap::sample(6, d, 1.0, 99).unwrap();
            let mut sum = 0.0;
            let mut count = 0;
            for (i, a) in points.iter().enumerate() {
                for b in points.iter().skip(i + 1) {
                    let approx = map.features(a).unwrap().dot(&map.features(b).unwrap());
                    let exact = map.kernel_exact(a, b).unwrap();
                    sum += (approx - exact).powi(2);
                    count += 1;
                }
            }
            (sum / count as f64).sqrt()
        };
        // one draw per size; 16× more frequencies should help by roughly 4×,
        // demand at least 2× to keep the test stable
        assert!(rms(4096) < rms(256) / 2.0);
    }

    #[test]
    fn regeneration_from_spec_is_exact() {
        let map = FeatureMap::sample(6, 100, 0.7, 31415).unwrap();
        let again = FeatureMap::from_spec(&map.spec()).unwrap();
        assert_eq!(map, again);
        let other_seed = FeatureMap::sample(6, 100, 0.7, 31416).unwrap();
        assert_ne!(map, other_seed);
    }

    #[test]
    fn lengthscale_change_keeps_frequencies_frozen() {
        let map = FeatureMap::sample(6, 32, 1.0, 5).unwrap();
        let rescaled = map.with_lengthscale(2.0).unwrap();
        assert_eq!(map.omega, rescaled.omega);
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(6), 6);
        // φ under τ=2 equals φ under τ=1 evaluated at x/2
        let half = x.clone() / 2.0;
        assert_eq!(rescaled.features(&x).unwrap(), map.features(&half).unwrap());
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(FeatureMap::sample(0, 10, 1.0, 0).is_err());
        assert!(FeatureMap::sample(6, 0, 1.0, 0).is_err());
        assert!(FeatureMap::sample(6, 10, 0.0, 0).is_err());
        assert!(FeatureMap::sample(6, 10, f64::NAN, 0).is_err());
        let map = FeatureMap::sample(6, 10, 1.0, 0).unwrap();
        assert!(map.features(&DVector::zeros(5)).is_err());
        assert!(map.with_lengthscale(-1.0).is_err());
    }
}
