//! Derivative-free simplex minimization with the classic
//! reflection/expansion/contraction/shrink coefficients (1, 2, 0.5, 0.5).
//!
//! Vertices that evaluate to NaN are treated as +∞ and get rejected, which
//! lets callers expose "invalid hyperparameter" regions without special
//! casing. The search terminates once the simplex is both geometrically small
//! and flat in value, or after an iteration cap.

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    /// Iteration cap; `None` means `200·k` for a `k`-dimensional problem.
    pub max_iterations: Option<usize>,
    /// Terminate when every vertex is within this ∞-norm distance of the best.
    pub x_tolerance: f64,
    /// ... and every vertex value is within this spread of the best value.
    pub f_tolerance: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iterations: None,
            x_tolerance: 1e-6,
            f_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Best simplex value before the first iteration and after each one;
    /// non-increasing by construction.
    pub trace: Vec<f64>,
    /// Whether both tolerances were met before the iteration cap.
    pub converged: bool,
}

pub fn minimize_nelder_mead(
    mut objective: impl FnMut(&DVector<f64>) -> f64,
    x0: &DVector<f64>,
    options: &NelderMeadOptions,
) -> Result<NelderMeadResult> {
    let k = x0.len();
    if k == 0 {
        return Err(Error::InvalidParameter(
            "cannot optimize over zero dimensions".into(),
        ));
    }
    let mut eval = |x: &DVector<f64>| -> f64 {
        let v = objective(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let f0 = eval(x0);
    if !f0.is_finite() {
        return Err(Error::Optimization(format!(
            "objective is {f0} at the initial point {:?}",
            x0.as_slice()
        )));
    }

    // initial simplex: 5% perturbation per coordinate, absolute for zeros
    let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(k + 1);
    simplex.push((x0.clone(), f0));
    for i in 0..k {
        let mut v = x0.clone();
        v[i] = if v[i] != 0.0 { v[i] * 1.05 } else { 0.00025 };
        let f = eval(&v);
        simplex.push((v, f));
    }

    let max_iterations = options.max_iterations.unwrap_or(200 * k);
    let mut trace = Vec::with_capacity(max_iterations + 1);
    let mut iterations = 0;
    let mut converged = false;

    let order = |s: &mut Vec<(DVector<f64>, f64)>| {
        s.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("NaN mapped to +inf"));
    };
    order(&mut simplex);
    trace.push(simplex[0].1);

    while iterations < max_iterations {
        let spread = simplex[k].1 - simplex[0].1;
        let diameter = simplex[1..]
            .iter()
            .map(|(v, _)| (v - &simplex[0].0).amax())
            .fold(0.0f64, f64::max);
        if diameter < options.x_tolerance && spread < options.f_tolerance {
            converged = true;
            break;
        }

        let mut centroid = DVector::zeros(k);
        for (v, _) in &simplex[..k] {
            centroid += v;
        }
        centroid /= k as f64;
        let worst = simplex[k].0.clone();
        let f_worst = simplex[k].1;

        let reflected = &centroid * 2.0 - &worst;
        let f_reflected = eval(&reflected);

        let replacement = if f_reflected < simplex[0].1 {
            let expanded = &centroid * 3.0 - &worst * 2.0;
            let f_expanded = eval(&expanded);
            if f_expanded < f_reflected {
                Some((expanded, f_expanded))
            } else {
                Some((reflected, f_reflected))
            }
        } else if f_reflected < simplex[k - 1].1 {
            Some((reflected, f_reflected))
        } else if f_reflected < f_worst {
            // outside contraction, halfway to the reflected point
            let contracted = &centroid * 1.5 - &worst * 0.5;
            let f_contracted = eval(&contracted);
            (f_contracted <= f_reflected).then_some((contracted, f_contracted))
        } else {
            // inside contraction, halfway back to the worst point
            let contracted = (&centroid + &worst) * 0.5;
            let f_contracted = eval(&contracted);
            (f_contracted < f_worst).then_some((contracted, f_contracted))
        };

        match replacement {
            Some(rep) => simplex[k] = rep,
            None => {
                // shrink everything toward the best vertex
                let best = simplex[0].0.clone();
                for (v, f) in simplex.iter_mut().skip(1) {
                    *v = (&best + &*v) * 0.5;
                    *f = eval(v);
                }
            }
        }
        order(&mut simplex);
        iterations += 1;
        trace.push(simplex[0].1);
    }

    let (x, value) = simplex.swap_remove(0);
    Ok(NelderMeadResult {
        x,
        value,
        iterations,
        trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defaults() -> NelderMeadOptions {
        NelderMeadOptions::default()
    }

    #[test]
    fn quadratic_bowl() {
        let r = minimize_nelder_mead(
            |x| (x[0] - 3.0).powi(2),
            &DVector::from_row_slice(&[0.0]),
            &defaults(),
        )
        .unwrap();
        assert!((r.x[0] - 3.0).abs() < 1e-5, "{}", r.x[0]);
        assert!(r.converged);
    }

    #[test]
    fn rosenbrock() {
        let r = minimize_nelder_mead(
            |x| {
                let (a, b) = (x[0], x[1]);
                100.0 * (b - a * a).powi(2) + (1.0 - a).powi(2)
            },
            &DVector::from_row_slice(&[-1.2, 1.0]),
            &defaults(),
        )
        .unwrap();
        assert!(
            (r.x[0] - 1.0).abs() < 1e-3 && (r.x[1] - 1.0).abs() < 1e-3,
            "{:?}",
            r.x
        );
    }

    #[test]
    fn constant_objective_returns_the_start() {
        let x0 = DVector::from_row_slice(&[0.4, -1.7, 2.2]);
        let r = minimize_nelder_mead(|_| 5.0, &x0, &defaults()).unwrap();
        assert_eq!(r.x, x0);
        assert_eq!(r.value, 5.0);
        assert!(r.converged, "flat objective must terminate by tolerance");
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let x0 = DVector::from_row_slice(&[0.0]);
        assert!(minimize_nelder_mead(|_| f64::NAN, &x0, &defaults()).is_err());
        assert!(minimize_nelder_mead(|_| f64::INFINITY, &x0, &defaults()).is_err());
    }

    #[test]
    fn trace_never_increases() {
        let r = minimize_nelder_mead(
            |x| x[0].sin() + 0.1 * x[0] * x[0] + (x[1] - 0.5).powi(2),
            &DVector::from_row_slice(&[2.0, -2.0]),
            &defaults(),
        )
        .unwrap();
        assert!(r.trace.len() >= 2);
        for w in r.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn nan_regions_are_avoided() {
        // objective undefined left of zero; minimum at 1
        let r = minimize_nelder_mead(
            |x| {
                if x[0] < 0.0 {
                    f64::NAN
                } else {
                    (x[0] - 1.0).powi(2)
                }
            },
            &DVector::from_row_slice(&[0.2]),
            &defaults(),
        )
        .unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn iteration_cap_respected() {
        let opts = NelderMeadOptions {
            max_iterations: Some(3),
            ..defaults()
        };
        let r = minimize_nelder_mead(
            |x| (x[0] - 100.0).powi(2),
            &DVector::from_row_slice(&[0.0]),
            &opts,
        )
        .unwrap();
        assert_eq!(r.iterations, 3);
        assert!(!r.converged);
    }
}
