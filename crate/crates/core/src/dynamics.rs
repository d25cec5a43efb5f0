//! Rigid-body rotational dynamics: Euler's equations in the body frame,
//! scalar-first quaternion kinematics, the torque excitation regimes and RK4
//! trajectory propagation.

use std::io::Write;

use nalgebra::{SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rk4_step, Quaternion};

/// Stacked `[q (4), ω (3)]` rigid-body state used by the integrator.
pub type BodyVector = SVector<f64, 7>;

/// Principal moments of inertia (kg·m²) of a body with diagonal inertia.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InertiaTriple {
    #[serde(rename = "Jx")]
    pub jx: f64,
    #[serde(rename = "Jy")]
    pub jy: f64,
    #[serde(rename = "Jz")]
    pub jz: f64,
}

impl InertiaTriple {
    /// Reference spacecraft, diag(100, 80, 70) kg·m².
    pub const NOMINAL: InertiaTriple = InertiaTriple {
        jx: 100.0,
        jy: 80.0,
        jz: 70.0,
    };

    /// Validated constructor: all moments positive and the triangle inequalities hold.
    pub fn new(jx: f64, jy: f64, jz: f64) -> Result<Self> {
        let j = Self { jx, jy, jz };
        if j.is_valid() {
            Ok(j)
        } else {
            Err(Error::Domain(format!(
                "({jx}, {jy}, {jz}) is not a physical inertia triple"
            )))
        }
    }

    pub fn is_valid(&self) -> bool {
        let [x, y, z] = self.to_array();
        [x, y, z].iter().all(|v| v.is_finite() && *v > 0.0)
            && x + y >= z
            && y + z >= x
            && z + x >= y
    }

    pub fn from_array(a: [f64; 3]) -> Result<Self> {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.jx, self.jy, self.jz]
    }

    pub fn moments(&self) -> Vector3<f64> {
        Vector3::new(self.jx, self.jy, self.jz)
    }
}

/// Attitude (inertial-to-body quaternion) and body angular velocity (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidBodyState {
    pub q: Quaternion,
    pub omega: Vector3<f64>,
}

impl RigidBodyState {
    pub fn new(q: Quaternion, omega: Vector3<f64>) -> Self {
        Self { q, omega }
    }

    /// Identity attitude spinning at (0.1, 0.1, 0.1) rad/s.
    pub fn reference_initial() -> Self {
        Self::new(Quaternion::IDENTITY, Vector3::new(0.1, 0.1, 0.1))
    }

    pub fn to_vector(&self) -> BodyVector {
        let q = self.q;
        BodyVector::from_column_slice(&[
            q.w,
            q.x,
            q.y,
            q.z,
            self.omega[0],
            self.omega[1],
            self.omega[2],
        ])
    }

    pub fn from_vector(v: &BodyVector) -> Self {
        Self::new(
            Quaternion::new(v[0], v[1], v[2], v[3]),
            Vector3::new(v[4], v[5], v[6]),
        )
    }

    /// Rotational kinetic energy ½ ωᵀ J ω.
    pub fn kinetic_energy(&self, j: &InertiaTriple) -> f64 {
        0.5 * self.omega.dot(&j.moments().component_mul(&self.omega))
    }

    /// Angular momentum magnitude ‖J ω‖.
    pub fn momentum_norm(&self, j: &InertiaTriple) -> f64 {
        j.moments().component_mul(&self.omega).norm()
    }
}

/// Excitation regime of the applied torque.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Zero,
    Full,
    Windowed,
    Persistent,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Zero => "zero",
            Regime::Full => "full",
            Regime::Windowed => "windowed",
            Regime::Persistent => "persistent",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zero" | "none" => Ok(Regime::Zero),
            "full" => Ok(Regime::Full),
            "windowed" => Ok(Regime::Windowed),
            "persistent" => Ok(Regime::Persistent),
            other => Err(Error::Domain(format!("unknown regime '{other}'"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Start times (s) of the three windowed pulses.
const WINDOWED_STARTS: [f64; 3] = [200.0, 250.0, 300.0];
const PERSISTENT_FIRST: f64 = 50.0;
const PERSISTENT_PERIOD: f64 = 25.0;
const PERSISTENT_COUNT: usize = 14;
const PULSE_WIDTH: f64 = 1.0;

/// Torque input as a function of time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorqueProfile {
    pub regime: Regime,
}

impl TorqueProfile {
    pub fn new(regime: Regime) -> Self {
        Self { regime }
    }

    pub fn zero() -> Self {
        Self::new(Regime::Zero)
    }

    /// Whether `t` lies in an active window of the regime. Windows are half-open `[t0, t0 + 1)`.
    pub fn is_active(&self, t: f64) -> bool {
        let in_window = |t0: f64| t >= t0 && t < t0 + PULSE_WIDTH;
        match self.regime {
            Regime::Zero => false,
            Regime::Full => true,
            Regime::Windowed => WINDOWED_STARTS.iter().any(|&t0| in_window(t0)),
            Regime::Persistent => (0..PERSISTENT_COUNT)
                .any(|k| in_window(PERSISTENT_FIRST + PERSISTENT_PERIOD * k as f64)),
        }
    }

    /// Torque (N·m) at time `t` seconds.
    pub fn torque_at(&self, t: f64) -> Vector3<f64> {
        if self.is_active(t) {
            multi_frequency_torque(t)
        } else {
            Vector3::zeros()
        }
    }
}

/// The continuous multi-frequency excitation used by every active regime.
fn multi_frequency_torque(t: f64) -> Vector3<f64> {
    Vector3::new(
        1.0 * (0.1 * t).sin() + 2.5 * (0.3 * t).cos() + 1.0 * (0.7 * t).sin() + 1.0 * (1.5 * t).sin(),
        2.6 * (0.15 * t).cos() + 3.0 * (0.4 * t).sin() + 2.4 * (0.8 * t).cos() + 1.8 * (1.8 * t).cos(),
        3.4 * (0.12 * t).sin() + 2.1 * (0.5 * t).cos() + 1.0 * (0.9 * t).sin() + 1.5 * (2.0 * t).sin(),
    )
}

pub fn torque_at(profile: &TorqueProfile, t: f64) -> Vector3<f64> {
    profile.torque_at(t)
}

/// Angular acceleration `J⁻¹(−ω × Jω + τ)` for diagonal `J`.
pub fn euler_rhs(j: &InertiaTriple, omega: &Vector3<f64>, tau: &Vector3<f64>) -> Vector3<f64> {
    euler_rhs_moments(&j.moments(), omega, tau)
}

/// [`euler_rhs`] on raw moments; the filters call this with `exp(θ)`, which
/// need not satisfy the triangle inequalities mid-estimation.
pub fn euler_rhs_moments(
    moments: &Vector3<f64>,
    omega: &Vector3<f64>,
    tau: &Vector3<f64>,
) -> Vector3<f64> {
    let h = moments.component_mul(omega);
    (tau - omega.cross(&h)).component_div(moments)
}

/// Quaternion rate `½ q ⊗ (0, ω)`.
pub fn quat_rhs(q: &Quaternion, omega: &Vector3<f64>) -> Quaternion {
    q.mul(Quaternion::pure([omega[0], omega[1], omega[2]]))
        .scale(0.5)
}

fn body_rhs(moments: &Vector3<f64>, profile: &TorqueProfile, t: f64, x: &BodyVector) -> BodyVector {
    let q = Quaternion::new(x[0], x[1], x[2], x[3]);
    let omega = Vector3::new(x[4], x[5], x[6]);
    let dq = quat_rhs(&q, &omega);
    let dw = euler_rhs_moments(moments, &omega, &profile.torque_at(t));
    BodyVector::from_column_slice(&[dq.w, dq.x, dq.y, dq.z, dw[0], dw[1], dw[2]])
}

/// One RK4 step of the coupled (q, ω) system. The quaternion is not renormalized here.
pub fn step_body(
    moments: &Vector3<f64>,
    profile: &TorqueProfile,
    x: &BodyVector,
    t: f64,
    dt: f64,
) -> Result<BodyVector> {
    rk4_step(|s, v: &BodyVector| body_rhs(moments, profile, s, v), x, t, dt)
}

/// Propagate `steps` RK4 steps from `x0` at `t = 0`; the output has `steps + 1`
/// states, starting with `x0`. The quaternion is renormalized after each step.
pub fn propagate(
    j: &InertiaTriple,
    x0: &RigidBodyState,
    profile: &TorqueProfile,
    dt: f64,
    steps: usize,
) -> Result<Vec<RigidBodyState>> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::Domain(format!("step size {dt} must be positive")));
    }
    let moments = j.moments();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(*x0);
    let mut x = x0.to_vector();
    for k in 0..steps {
        let t = k as f64 * dt;
        x = step_body(&moments, profile, &x, t, dt)?;
        let q = Quaternion::new(x[0], x[1], x[2], x[3]).normalize();
        x[0] = q.w;
        x[1] = q.x;
        x[2] = q.y;
        x[3] = q.z;
        out.push(RigidBodyState::from_vector(&x));
    }
    Ok(out)
}

/// Write a trajectory as CSV with columns `t,qw,qx,qy,qz,wx,wy,wz`.
///
/// `preamble` lines are emitted first, each prefixed with `# `.
pub fn write_trajectory_csv<W: Write>(
    mut w: W,
    dt: f64,
    states: &[RigidBodyState],
    preamble: &[String],
) -> Result<()> {
    for line in preamble {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "t,qw,qx,qy,qz,wx,wy,wz")?;
    for (k, s) in states.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            k as f64 * dt,
            s.q.w,
            s.q.x,
            s.q.y,
            s.q.z,
            s.omega[0],
            s.omega[1],
            s.omega[2]
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_vec_close(a: &Vector3<f64>, b: &Vector3<f64>, tol: f64) {
        assert!((a - b).amax() < tol, "{a} vs {b}");
    }

    #[test]
    fn inertia_validation() {
        assert!(InertiaTriple::new(100.0, 80.0, 70.0).is_ok());
        assert!(InertiaTriple::new(1.0, 1.0, 2.0).is_ok());
        assert!(InertiaTriple::new(140.0, 20.0, 36.0).is_err());
        assert!(InertiaTriple::new(-1.0, 1.0, 1.0).is_err());
        assert!(InertiaTriple::new(f64::NAN, 1.0, 1.0).is_err());
    }

    #[test]
    fn euler_rhs_without_rotation_is_torque_over_inertia() {
        let j = InertiaTriple::NOMINAL;
        let tau = Vector3::new(1.0, -2.0, 3.5);
        let out = euler_rhs(&j, &Vector3::zeros(), &tau);
        assert_vec_close(&out, &Vector3::new(0.01, -0.025, 0.05), 1e-15);
    }

    #[test]
    fn euler_rhs_spherical_body_is_torque_free_steady() {
        let j = InertiaTriple::new(5.0, 5.0, 5.0).unwrap();
        let out = euler_rhs(&j, &Vector3::new(0.3, -1.2, 0.7), &Vector3::zeros());
        assert_vec_close(&out, &Vector3::zeros(), 1e-15);
    }

    #[test]
    fn euler_rhs_nominal_gyroscopic_term() {
        let out = euler_rhs(
            &InertiaTriple::NOMINAL,
            &Vector3::new(0.1, 0.1, 0.1),
            &Vector3::zeros(),
        );
        assert_vec_close(&out, &Vector3::new(0.001, -0.00375, 0.2 / 70.0), 1e-12);
        assert!((out[2] - 0.002_857_14).abs() < 1e-8);
    }

    #[test]
    fn quat_rhs_examples() {
        let q = Quaternion::new(0.5, 0.5, 0.5, 0.5);
        assert_eq!(quat_rhs(&q, &Vector3::zeros()).to_array(), [0.0; 4]);

        let dq = quat_rhs(&Quaternion::IDENTITY, &Vector3::new(0.2, -0.4, 1.0));
        assert_eq!(dq.to_array(), [0.0, 0.1, -0.2, 0.5]);

        let dq = quat_rhs(&Quaternion::new(0.0, 1.0, 0.0, 0.0), &Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(dq.to_array(), [0.0, 0.0, -1.0, 0.0]);
    }

    #[test]
    fn full_torque_at_zero() {
        let tau = TorqueProfile::new(Regime::Full).torque_at(0.0);
        assert_vec_close(&tau, &Vector3::new(2.5, 6.8, 2.1), 1e-12);
    }

    #[test]
    fn windowed_torque_is_off_outside_pulses() {
        let p = TorqueProfile::new(Regime::Windowed);
        assert_eq!(p.torque_at(150.0), Vector3::zeros());
        assert_eq!(p.torque_at(201.0), Vector3::zeros());
        assert_eq!(p.torque_at(200.0), multi_frequency_torque(200.0));
        assert_eq!(p.torque_at(300.5), multi_frequency_torque(300.5));
    }

    fn active_windows(p: &TorqueProfile) -> usize {
        let dt = 0.01;
        let mut count = 0;
        let mut prev = false;
        for k in 0..=40_000 {
            let on = p.is_active(k as f64 * dt);
            if on && !prev {
                count += 1;
            }
            prev = on;
        }
        count
    }

    #[test]
    fn regime_window_counts() {
        assert_eq!(active_windows(&TorqueProfile::new(Regime::Windowed)), 3);
        assert_eq!(active_windows(&TorqueProfile::new(Regime::Persistent)), 14);
        assert_eq!(active_windows(&TorqueProfile::zero()), 0);
        let p = TorqueProfile::new(Regime::Persistent);
        assert!(p.is_active(375.5));
        assert!(!p.is_active(400.0));
        assert!(!p.is_active(49.99));
    }

    #[test]
    fn gated_regimes_match_full_profile_inside_windows() {
        let full = TorqueProfile::new(Regime::Full);
        for regime in [Regime::Windowed, Regime::Persistent] {
            let p = TorqueProfile::new(regime);
            for k in 0..4000 {
                let t = k as f64 * 0.1;
                let expected = if p.is_active(t) {
                    full.torque_at(t)
                } else {
                    Vector3::zeros()
                };
                assert_eq!(p.torque_at(t), expected);
            }
        }
        for k in 0..100 {
            assert_eq!(TorqueProfile::zero().torque_at(k as f64 * 4.0), Vector3::zeros());
        }
    }

    #[test]
    fn still_body_stays_still() {
        let x0 = RigidBodyState::new(Quaternion::IDENTITY, Vector3::zeros());
        let traj = propagate(&InertiaTriple::NOMINAL, &x0, &TorqueProfile::zero(), 0.1, 50).unwrap();
        assert_eq!(traj.len(), 51);
        assert!(traj.iter().all(|s| *s == x0));
    }

    #[test]
    fn torque_free_motion_conserves_energy_and_momentum() {
        let j = InertiaTriple::NOMINAL;
        let x0 = RigidBodyState::reference_initial();
        let traj = propagate(&j, &x0, &TorqueProfile::zero(), 0.05, 600).unwrap();
        let e0 = x0.kinetic_energy(&j);
        let h0 = x0.momentum_norm(&j);
        for s in &traj {
            assert!((s.kinetic_energy(&j) / e0 - 1.0).abs() < 1e-8);
            assert!((s.momentum_norm(&j) / h0 - 1.0).abs() < 1e-8);
            assert!((s.q.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn step_refinement_is_fourth_order() {
        let j = InertiaTriple::NOMINAL;
        let x0 = RigidBodyState::reference_initial();
        let p = TorqueProfile::new(Regime::Full);
        let end = |dt: f64| {
            let steps = (1.0 / dt).round() as usize;
            propagate(&j, &x0, &p, dt, steps).unwrap()[steps].to_vector()
        };
        let (a, b, c) = (end(0.2), end(0.1), end(0.05));
        let ratio = (a - b).norm() / (b - c).norm();
        assert!((10.0..24.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x0 = RigidBodyState::reference_initial();
        assert!(propagate(&InertiaTriple::NOMINAL, &x0, &TorqueProfile::zero(), 0.0, 1).is_err());
    }

    #[test]
    fn csv_layout() {
        let x0 = RigidBodyState::reference_initial();
        let traj = propagate(&InertiaTriple::NOMINAL, &x0, &TorqueProfile::zero(), 0.5, 2).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, 0.5, &traj, &["seed=1".into()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# seed=1");
        assert_eq!(lines[1], "t,qw,qx,qy,qz,wx,wy,wz");
        assert_eq!(lines.len(), 5);
        assert!(lines[2].starts_with("0,1,0,0,0,0.1,0.1,0.1"));
        assert!(lines[4].starts_with("1,"));
    }
}
