//! Two-link planar manipulator: rigid-body regressor, torque simulation with
//! unmodeled friction, sinusoidal trajectory generation and dataset I/O.
//!
//! The regressor `ψ(x)` is linear in the five base inertial parameters `π`,
//! so friction-free torques are `ψ(x)ᵀπ`. The simulator adds viscous and
//! Coulomb friction plus Gaussian measurement noise, none of which appear in
//! `ψ`; the parametric model is misspecified by construction.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of joints of the simulated arm.
pub const ARM_JOINTS: usize = 2;
/// Number of base inertial parameters of the simulated arm.
pub const ARM_BASE_PARAMS: usize = 5;

/// Joint positions, velocities and accelerations at one time instant.
///
/// The stacked vector `x = [qᵀ dqᵀ ddqᵀ]ᵀ` of length `3n` is the input
/// location of every model.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    q: DVector<f64>,
    dq: DVector<f64>,
    ddq: DVector<f64>,
}

impl JointState {
    pub fn new(q: DVector<f64>, dq: DVector<f64>, ddq: DVector<f64>) -> Result<Self> {
        let n = q.len();
        if n == 0 {
            return Err(Error::InvalidParameter(
                "joint state must have at least one joint".into(),
            ));
        }
        if dq.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: dq.len(),
                context: "dq",
            });
        }
        if ddq.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: ddq.len(),
                context: "ddq",
            });
        }
        for v in [&q, &dq, &ddq] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("joint state"));
            }
        }
        Ok(Self { q, dq, ddq })
    }

    pub fn from_slices(q: &[f64], dq: &[f64], ddq: &[f64]) -> Result<Self> {
        Self::new(
            DVector::from_row_slice(q),
            DVector::from_row_slice(dq),
            DVector::from_row_slice(ddq),
        )
    }

    pub fn joints(&self) -> usize {
        self.q.len()
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn dq(&self) -> &DVector<f64> {
        &self.dq
    }

    pub fn ddq(&self) -> &DVector<f64> {
        &self.ddq
    }

    /// Stacked input location `x = [qᵀ dqᵀ ddqᵀ]ᵀ ∈ ℝ^{3n}`.
    pub fn stacked(&self) -> DVector<f64> {
        let n = self.joints();
        let mut x = DVector::zeros(3 * n);
        x.rows_mut(0, n).copy_from(&self.q);
        x.rows_mut(n, n).copy_from(&self.dq);
        x.rows_mut(2 * n, n).copy_from(&self.ddq);
        x
    }
}

/// Physical parameters of the two-link arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmParameters {
    /// Link masses (kg).
    pub masses: [f64; 2],
    /// Link lengths (m).
    pub lengths: [f64; 2],
    /// Center-of-mass distances from the joint axes (m).
    pub com_distances: [f64; 2],
    /// Link inertias about the center of mass (kg·m²).
    pub inertias: [f64; 2],
    /// Viscous friction coefficients (N·m·s/rad).
    pub viscous_friction: [f64; 2],
    /// Coulomb friction coefficients (N·m).
    pub coulomb_friction: [f64; 2],
    /// Gravitational acceleration (m/s²).
    pub gravity: f64,
    /// Standard deviation of the torque measurement noise (N·m).
    pub noise_std: f64,
}

impl Default for ArmParameters {
    fn default() -> Self {
        let masses = [1.0, 0.8];
        let lengths = [0.5, 0.4];
        Self {
            masses,
            lengths,
            com_distances: [lengths[0] / 2.0, lengths[1] / 2.0],
            // uniform rod: I = m l² / 12
            inertias: [
                masses[0] * lengths[0] * lengths[0] / 12.0,
                masses[1] * lengths[1] * lengths[1] / 12.0,
            ],
            viscous_friction: [0.3, 0.2],
            coulomb_friction: [0.4, 0.25],
            gravity: 9.81,
            noise_std: 0.05,
        }
    }
}

impl ArmParameters {
    pub fn validate(&self) -> Result<()> {
        for i in 0..2 {
            if !(self.masses[i] > 0.0 && self.masses[i].is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "mass {} must be strictly positive, got {}",
                    i + 1,
                    self.masses[i]
                )));
            }
            if !(self.lengths[i] > 0.0 && self.lengths[i].is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "length {} must be strictly positive, got {}",
                    i + 1,
                    self.lengths[i]
                )));
            }
            if !(self.com_distances[i] > 0.0 && self.com_distances[i].is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "center-of-mass distance {} must be strictly positive, got {}",
                    i + 1,
                    self.com_distances[i]
                )));
            }
            if self.com_distances[i] > self.lengths[i] {
                return Err(Error::InvalidParameter(format!(
                    "center-of-mass distance {} exceeds link length",
                    i + 1
                )));
            }
            if !(self.inertias[i] > 0.0 && self.inertias[i].is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "inertia {} must be strictly positive, got {}",
                    i + 1,
                    self.inertias[i]
                )));
            }
            if !(self.viscous_friction[i] >= 0.0 && self.viscous_friction[i].is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "viscous friction {} must be nonnegative",
                    i + 1
                )));
            }
            if !(self.coulomb_friction[i] >= 0.0 && self.coulomb_friction[i].is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "Coulomb friction {} must be nonnegative",
                    i + 1
                )));
            }
        }
        if !self.gravity.is_finite() {
            return Err(Error::NonFinite("gravity"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidParameter(
                "noise standard deviation must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Base inertial parameter vector `π ∈ ℝ⁵`.
    ///
    /// π₁ = m₁lc₁² + m₂l₁² + I₁, π₂ = m₂lc₂² + I₂, π₃ = m₂l₁lc₂,
    /// π₄ = m₁lc₁ + m₂l₁, π₅ = m₂lc₂.
    pub fn base_parameters(&self) -> DVector<f64> {
        let [m1, m2] = self.masses;
        let [l1, _l2] = self.lengths;
        let [lc1, lc2] = self.com_distances;
        let [i1, i2] = self.inertias;
        DVector::from_row_slice(&[
            m1 * lc1 * lc1 + m2 * l1 * l1 + i1,
            m2 * lc2 * lc2 + i2,
            m2 * l1 * lc2,
            m1 * lc1 + m2 * l1,
            m2 * lc2,
        ])
    }

    /// Friction torque `fᵢ(dq) = Fvᵢ·dqᵢ + Fcᵢ·sign(dqᵢ)`, with sign(0) = 0.
    pub fn friction(&self, dq: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(2, |i, _| {
            self.viscous_friction[i] * dq[i] + self.coulomb_friction[i] * sign(dq[i])
        })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Rigid-body regressor `ψ(x) ∈ ℝ^{5×2}` of the two-link arm, such that
/// `ψ(x)ᵀπ` are the friction-free joint torques `M(q)q̈ + C(q,q̇)q̇ + G(q)`.
pub fn rbd_regressor(x: &JointState, gravity: f64) -> Result<DMatrix<f64>> {
    if x.joints() != ARM_JOINTS {
        return Err(Error::DimensionMismatch {
            expected: ARM_JOINTS,
            got: x.joints(),
            context: "rbd regressor joints",
        });
    }
    if !gravity.is_finite() {
        return Err(Error::NonFinite("gravity"));
    }
    let (q1, q2) = (x.q[0], x.q[1]);
    let (dq1, dq2) = (x.dq[0], x.dq[1]);
    let (ddq1, ddq2) = (x.ddq[0], x.ddq[1]);
    let (c2, s2) = (q2.cos(), q2.sin());

    let mut psi = DMatrix::zeros(ARM_BASE_PARAMS, ARM_JOINTS);
    // joint 1 column
    psi[(0, 0)] = ddq1;
    psi[(1, 0)] = ddq1 + ddq2;
    psi[(2, 0)] = (2.0 * ddq1 + ddq2) * c2 - (2.0 * dq1 * dq2 + dq2 * dq2) * s2;
    psi[(3, 0)] = gravity * q1.cos();
    psi[(4, 0)] = gravity * (q1 + q2).cos();
    // joint 2 column
    psi[(1, 1)] = ddq1 + ddq2;
    psi[(2, 1)] = ddq1 * c2 + dq1 * dq1 * s2;
    psi[(4, 1)] = gravity * (q1 + q2).cos();
    Ok(psi)
}

/// Measured torques for one sample: `y = ψ(x)ᵀπ + f(dq) + e` with
/// `e ~ N(0, σ² I)`. The noise draw is a pure function of `(seed, sample_index)`.
pub fn simulate_torques(
    x: &JointState,
    arm: &ArmParameters,
    seed: u64,
    sample_index: u64,
) -> Result<DVector<f64>> {
    arm.validate()?;
    let psi = rbd_regressor(x, arm.gravity)?;
    let pi = arm.base_parameters();
    let mut y = psi.transpose() * &pi + arm.friction(x.dq());
    if arm.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(sample_index);
        for yi in y.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *yi += arm.noise_std * e;
        }
    }
    Ok(y)
}

/// Per-joint sinusoid parameters: `q(t) = offset + amplitude·sin(2πf·t + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRegime {
    pub amplitudes: Vec<f64>,
    /// Frequencies in Hz; each must stay below half the sampling rate.
    pub frequencies: Vec<f64>,
    pub phases: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl TrajectoryRegime {
    pub fn joints(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.amplitudes.len();
        if n == 0 {
            return Err(Error::InvalidParameter(
                "trajectory regime needs at least one joint".into(),
            ));
        }
        for (name, v) in [
            ("frequencies", &self.frequencies),
            ("phases", &self.phases),
            ("offsets", &self.offsets),
        ] {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: v.len(),
                    context: match name {
                        "frequencies" => "trajectory frequencies",
                        "phases" => "trajectory phases",
                        _ => "trajectory offsets",
                    },
                });
            }
        }
        let all = self
            .amplitudes
            .iter()
            .chain(&self.frequencies)
            .chain(&self.phases)
            .chain(&self.offsets);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory regime"));
        }
        Ok(())
    }
}

/// Sample the sinusoidal trajectory of `regime` at `rate` Hz for `duration`
/// seconds, with exact analytic velocities and accelerations.
pub fn gen_trajectory(
    regime: &TrajectoryRegime,
    duration: f64,
    rate: f64,
) -> Result<Vec<JointState>> {
    regime.validate()?;
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sampling rate must be positive, got {rate}"
        )));
    }
    for (i, &f) in regime.frequencies.iter().enumerate() {
        if f >= rate / 2.0 {
            return Err(Error::InvalidParameter(format!(
                "joint {} frequency {f} Hz violates the Nyquist limit {} Hz",
                i + 1,
                rate / 2.0
            )));
        }
    }
    let count_f = duration * rate;
    if !(count_f >= 0.0 && count_f.is_finite() && (count_f - count_f.round()).abs() < 1e-9) {
        return Err(Error::InvalidParameter(format!(
            "duration·rate = {count_f} is not an integer sample count"
        )));
    }
    let count = count_f.round() as usize;
    let n = regime.joints();
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let t = k as f64 / rate;
        let mut q = DVector::zeros(n);
        let mut dq = DVector::zeros(n);
        let mut ddq = DVector::zeros(n);
        for i in 0..n {
            let w = 2.0 * std::f64::consts::PI * regime.frequencies[i];
            let arg = w * t + regime.phases[i];
            q[i] = regime.offsets[i] + regime.amplitudes[i] * arg.sin();
            dq[i] = regime.amplitudes[i] * w * arg.cos();
            ddq[i] = -regime.amplitudes[i] * w * w * arg.sin();
        }
        out.push(JointState::new(q, dq, ddq)?);
    }
    Ok(out)
}

/// One timestamped sample: input location plus measured torques.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub time: f64,
    pub state: JointState,
    pub torques: DVector<f64>,
}

/// An ordered torque dataset sampled at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    rate: f64,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, rate: f64) -> Result<Self> {
        if let Some(first) = samples.first() {
            let n = first.state.joints();
            for (i, s) in samples.iter().enumerate() {
                if s.state.joints() != n || s.torques.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: s.state.joints().max(s.torques.len()),
                        context: "dataset joint count",
                    });
                }
                if i > 0 {
                    let dt = s.time - samples[i - 1].time;
                    if dt <= 0.0 {
                        return Err(Error::InvalidParameter(format!(
                            "timestamps not strictly increasing at sample {i}"
                        )));
                    }
                    if (dt * rate - 1.0).abs() > 1e-6 {
                        return Err(Error::InvalidParameter(format!(
                            "sample spacing {dt} at index {i} does not match rate {rate} Hz"
                        )));
                    }
                }
            }
        }
        Ok(Self { samples, rate })
    }

    /// Generate a dataset by simulating torques along a trajectory.
    pub fn simulate(
        regime: &TrajectoryRegime,
        arm: &ArmParameters,
        duration: f64,
        rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let states = gen_trajectory(regime, duration, rate)?;
        let mut samples = Vec::with_capacity(states.len());
        for (k, state) in states.into_iter().enumerate() {
            let torques = simulate_torques(&state, arm, seed, k as u64)?;
            samples.push(Sample {
                time: k as f64 / rate,
                state,
                torques,
            });
        }
        Dataset::new(samples, rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn joints(&self) -> usize {
        self.samples.first().map_or(0, |s| s.state.joints())
    }

    /// Borrow a contiguous window `[start, start+len)` as a new dataset view.
    pub fn window(&self, start: usize, len: usize) -> Result<Dataset> {
        if start + len > self.samples.len() {
            return Err(Error::InvalidParameter(format!(
                "window [{start}, {}) exceeds dataset length {}",
                start + len,
                self.samples.len()
            )));
        }
        Ok(Dataset {
            samples: self.samples[start..start + len].to_vec(),
            rate: self.rate,
        })
    }
}

/// Write a dataset as CSV: header `t,q1..qn,dq1..dqn,ddq1..ddqn,y1..yn`,
/// one row per sample. Finite values round-trip exactly.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut text = String::new();
    let n = if dataset.is_empty() {
        ARM_JOINTS
    } else {
        dataset.joints()
    };
    text.push('t');
    for prefix in ["q", "dq", "ddq", "y"] {
        for i in 1..=n {
            let _ = write!(text, ",{prefix}{i}");
        }
    }
    text.push('\n');
    for s in dataset.samples() {
        if !s.time.is_finite() || s.torques.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset sample"));
        }
        let _ = write!(text, "{}", s.time);
        for block in [s.state.q(), s.state.dq(), s.state.ddq(), &s.torques] {
            for v in block.iter() {
                let _ = write!(text, ",{v}");
            }
        }
        text.push('\n');
    }
    crate::write_atomic(path, text.as_bytes())
}

/// Load a dataset written by [`save_dataset`]. The sampling rate is inferred
/// from the first timestamp spacing (0 when fewer than two samples).
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let display = path.display().to_string();
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: display.clone(),
        line: 1,
        message: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "t" || !(cols.len() - 1).is_multiple_of(4) {
        return Err(Error::Parse {
            path: display,
            line: 1,
            message: format!("malformed header `{header}`"),
        });
    }
    let n = (cols.len() - 1) / 4;
    for (b, prefix) in ["q", "dq", "ddq", "y"].iter().enumerate() {
        for j in 1..=n {
            let col = &cols[1 + b * n + (j - 1)];
            if *col != format!("{prefix}{j}") {
                return Err(Error::Parse {
                    path: display,
                    line: 1,
                    message: format!("unexpected column `{col}`, expected `{prefix}{j}`"),
                });
            }
        }
    }

    let mut samples = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + 4 * n {
            return Err(Error::Parse {
                path: display,
                line: line_no,
                message: format!("expected {} columns, found {}", 1 + 4 * n, fields.len()),
            });
        }
        let mut values = Vec::with_capacity(fields.len());
        for f in &fields {
            match f.parse::<f64>() {
                Ok(v) => values.push(v),
                Err(_) => {
                    return Err(Error::Parse {
                        path: display,
                        line: line_no,
                        message: format!("non-numeric cell `{f}`"),
                    })
                }
            }
        }
        let state = JointState::from_slices(
            &values[1..1 + n],
            &values[1 + n..1 + 2 * n],
            &values[1 + 2 * n..1 + 3 * n],
        )?;
        samples.push(Sample {
            time: values[0],
            state,
            torques: DVector::from_row_slice(&values[1 + 3 * n..]),
        });
    }
    let rate = if samples.len() >= 2 {
        1.0 / (samples[1].time - samples[0].time)
    } else {
        0.0
    };
    Dataset::new(samples, rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_state(rng: &mut ChaCha8Rng) -> JointState {
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..2).map(|_| rng.random_range(-3.0..3.0)).collect()
        };
        JointState::from_slices(&draw(rng), &draw(rng), &draw(rng)).unwrap()
    }

    #[test]
    fn regressor_at_rest_keeps_only_gravity() {
        let x = JointState::from_slices(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let psi = rbd_regressor(&x, 9.81).unwrap();
        assert_eq!(psi.column(0).as_slice(), &[0.0, 0.0, 0.0, 9.81, 9.81]);
        assert_eq!(psi.column(1).as_slice(), &[0.0, 0.0, 0.0, 0.0, 9.81]);
    }

    #[test]
    fn regressor_quarter_turn_zeros() {
        let x = JointState::from_slices(
            &[0.0, std::f64::consts::FRAC_PI_2],
            &[0.0, 0.0],
            &[0.0, 0.0],
        )
        .unwrap();
        let psi = rbd_regressor(&x, 9.81).unwrap();
        assert!(psi[(2, 0)].abs() < 1e-15);
        assert!(psi[(2, 1)].abs() < 1e-15);
        assert!(psi[(4, 1)].abs() < 1e-12); // g·cos(π/2)
    }

    #[test]
    fn regressor_matches_closed_form_oracle() {
        let mut rng = rng(17);
        for _ in 0..1000 {
            let x = random_state(&mut rng);
            let pi = DVector::from_fn(5, |_, _| rng.random_range(-2.0..2.0));
            let psi = rbd_regressor(&x, 9.81).unwrap();
            let via_regressor = psi.transpose() * &pi;
            let via_oracle = oracle::closed_form_torques(&x, &pi, 9.81);
            for j in 0..2 {
                assert!(
                    (via_regressor[j] - via_oracle[j]).abs() < 1e-12,
                    "mismatch at joint {j}: {} vs {}",
                    via_regressor[j],
                    via_oracle[j]
                );
            }
        }
    }

    #[test]
    fn rest_torques_equal_potential_gradient() {
        let mut rng = rng(3);
        for _ in 0..20 {
            let q = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let x = JointState::from_slices(&q, &[0.0; 2], &[0.0; 2]).unwrap();
            let pi = DVector::from_fn(5, |_, _| rng.random_range(-2.0..2.0));
            let tau = rbd_regressor(&x, 9.81).unwrap().transpose() * &pi;
            let h = 1e-6;
            for j in 0..2 {
                let mut qp = q;
                let mut qm = q;
                qp[j] += h;
                qm[j] -= h;
                let grad = (oracle::potential_energy(&qp, &pi, 9.81)
                    - oracle::potential_energy(&qm, &pi, 9.81))
                    / (2.0 * h);
                assert!(
                    (tau[j] - grad).abs() < 1e-6,
                    "joint {j}: {} vs {grad}",
                    tau[j]
                );
            }
        }
    }

    #[test]
    fn regressor_rejects_wrong_joint_count() {
        let x = JointState::from_slices(&[0.0], &[0.0], &[0.0]).unwrap();
        assert!(rbd_regressor(&x, 9.81).is_err());
    }

    #[test]
    fn simulation_without_friction_or_noise_is_rbd() {
        let arm = ArmParameters {
            viscous_friction: [0.0, 0.0],
            coulomb_friction: [0.0, 0.0],
            noise_std: 0.0,
            ..ArmParameters::default()
        };
        let mut rng = rng(5);
        let x = random_state(&mut rng);
        let y = simulate_torques(&x, &arm, 0, 0).unwrap();
        let expected = rbd_regressor(&x, arm.gravity).unwrap().transpose() * arm.base_parameters();
        assert_relative_eq!(y, expected, epsilon = 1e-14);
    }

    #[test]
    fn coulomb_term_vanishes_at_rest() {
        let arm = ArmParameters {
            noise_std: 0.0,
            ..ArmParameters::default()
        };
        let x = JointState::from_slices(&[0.4, -0.2], &[0.0, 0.0], &[0.1, 0.3]).unwrap();
        let y = simulate_torques(&x, &arm, 0, 0).unwrap();
        let expected = rbd_regressor(&x, arm.gravity).unwrap().transpose() * arm.base_parameters();
        assert_relative_eq!(y, expected, epsilon = 1e-14);
    }

    #[test]
    fn simulation_is_deterministic_per_seed_and_index() {
        let arm = ArmParameters::default();
        let mut rng = rng(9);
        let x = random_state(&mut rng);
        let a = simulate_torques(&x, &arm, 42, 7).unwrap();
        let b = simulate_torques(&x, &arm, 42, 7).unwrap();
        assert_eq!(a, b);
        let c = simulate_torques(&x, &arm, 42, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_arm_rejected() {
        let mut arm = ArmParameters::default();
        arm.masses[0] = -1.0;
        let x = JointState::from_slices(&[0.0; 2], &[0.0; 2], &[0.0; 2]).unwrap();
        assert!(simulate_torques(&x, &arm, 0, 0).is_err());
        let mut arm = ArmParameters::default();
        arm.com_distances[1] = 2.0 * arm.lengths[1];
        assert!(arm.validate().is_err());
    }

    fn regime_a() -> TrajectoryRegime {
        TrajectoryRegime {
            amplitudes: vec![1.0, 0.8],
            frequencies: vec![0.8, 0.5],
            phases: vec![0.0, 1.0],
            offsets: vec![0.2, -0.4],
        }
    }

    #[test]
    fn zero_amplitude_is_constant() {
        let regime = TrajectoryRegime {
            amplitudes: vec![0.0, 0.0],
            frequencies: vec![0.8, 0.5],
            phases: vec![0.0, 1.0],
            offsets: vec![0.7, -0.3],
        };
        for s in gen_trajectory(&regime, 2.0, 20.0).unwrap() {
            assert_eq!(s.q().as_slice(), &[0.7, -0.3]);
            assert_eq!(s.dq().as_slice(), &[0.0, 0.0]);
            assert_eq!(s.ddq().as_slice(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn acceleration_satisfies_sinusoid_identity() {
        let regime = regime_a();
        for s in gen_trajectory(&regime, 3.0, 20.0).unwrap() {
            for i in 0..2 {
                let w = 2.0 * std::f64::consts::PI * regime.frequencies[i];
                let expected = -w * w * (s.q()[i] - regime.offsets[i]);
                assert_relative_eq!(s.ddq()[i], expected, epsilon = 1e-9, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn default_duration_yields_ten_thousand_samples() {
        let states = gen_trajectory(&regime_a(), 500.0, 20.0).unwrap();
        assert_eq!(states.len(), 10000);
    }

    #[test]
    fn aliasing_frequency_rejected() {
        let mut regime = regime_a();
        regime.frequencies[0] = 10.0;
        assert!(gen_trajectory(&regime, 1.0, 20.0).is_err());
    }

    #[test]
    fn derivatives_match_central_differences() {
        let rate = 200.0;
        let states = gen_trajectory(&regime_a(), 2.0, rate).unwrap();
        let dt = 1.0 / rate;
        // central differences are O(Δt²); at 200 Hz that is ~2.5e-5·|q'''|
        for k in 1..states.len() - 1 {
            for i in 0..2 {
                let dq_fd = (states[k + 1].q()[i] - states[k - 1].q()[i]) / (2.0 * dt);
                let ddq_fd = (states[k + 1].q()[i] - 2.0 * states[k].q()[i] + states[k - 1].q()[i])
                    / (dt * dt);
                assert!((states[k].dq()[i] - dq_fd).abs() < 2e-3);
                assert!((states[k].ddq()[i] - ddq_fd).abs() < 2e-2);
            }
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        let ds = Dataset::new(vec![], 20.0).unwrap();
        save_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let loaded = load_dataset(&path).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn single_sample_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.csv");
        let state = JointState::from_slices(&[0.1, 0.2], &[0.3, 0.4], &[0.5, 0.6]).unwrap();
        let ds = Dataset::new(
            vec![Sample {
                time: 0.0,
                state,
                torques: DVector::from_row_slice(&[1.5, -2.5]),
            }],
            20.0,
        )
        .unwrap();
        save_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,q1,q2,dq1,dq2,ddq1,ddq2,y1,y2");
        assert_eq!(lines.next().unwrap().split(',').count(), 9);
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.samples(), ds.samples());
    }

    #[test]
    fn generated_dataset_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.csv");
        let ds =
            Dataset::simulate(&regime_a(), &ArmParameters::default(), 500.0, 20.0, 11).unwrap();
        assert_eq!(ds.len(), 10000);
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded, ds);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "t,q1,q2,dq1,dq2,ddq1,ddq2,y1,y2\n0,1,2,3,4,5,6,7,8\n0.05,1,2,3\n",
        )
        .unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains(":3:"), "got {err}");

        std::fs::write(
            &path,
            "t,q1,q2,dq1,dq2,ddq1,ddq2,y1,y2\n0,1,2,bogus,4,5,6,7,8\n",
        )
        .unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains(":2:") && err.to_string().contains("bogus"));

        std::fs::write(&path, "time,q1\n").unwrap();
        assert!(load_dataset(&path).is_err());
    }
}
