//! The UKF with a scheduled virtual-sensor correction on the inertia block.
//!
//! Each step runs the usual predict/correct cycle against the attitude and
//! gyro measurement, then (when the schedule fires) a second correction that
//! treats the flow-matching summary `(μ, Σ)` as a direct measurement of
//! `exp(θ)`. Plain UKF, EKF and EnKF runs share the same configuration so the
//! four filters can be compared on identical data.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{propagate, InertiaTriple, Regime, RigidBodyState, TorqueProfile};
use crate::error::{Error, Result};
use crate::filters::{
    ekf_step, enkf_step, measurement_vector, prior_to_theta, sigma_point_update, theta_block,
    theta_unmap, ukf_predict, ukf_update, AttitudeObservation, EnkfConfig, Ensemble, FilterBelief,
    ObservationModel, RigidBodyProcess, TraceRow, UpdateSigma, UtParams, MEAS_DIM, STATE_DIM,
    THETA_OFFSET,
};
use crate::numerics::{cholesky, condition_covariance, default_jitter, symmetrize_jitter, Quaternion, RngStream};
use crate::sensing::{measure_trajectory, Measurement};
use crate::wfm::GaussianBelief;

/// When the virtual sensor fires: every `period` steps from `start` (steps are 0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub period: usize,
    pub start: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { period: 1, start: 0 }
    }
}

impl Schedule {
    pub fn is_due(&self, step: usize) -> bool {
        self.period > 0 && step >= self.start && (step - self.start) % self.period == 0
    }
}

/// Pseudo-measurement of the principal moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualSensor {
    /// Measured moments (kg·m²).
    pub z: Vector3<f64>,
    /// Noise covariance (kg²·m⁴), positive definite.
    pub r: Matrix3<f64>,
    pub schedule: Schedule,
}

impl VirtualSensor {
    /// The noise covariance is symmetrized and floored with the default jitter.
    pub fn new(z: Vector3<f64>, r: Matrix3<f64>, schedule: Schedule) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("virtual measurement must be finite".into()));
        }
        let dyn_r = DMatrix::from_column_slice(3, 3, r.as_slice());
        let floored = symmetrize_jitter(&dyn_r, default_jitter(&dyn_r));
        cholesky(&floored)?;
        Ok(Self {
            z,
            r: Matrix3::from_column_slice(floored.as_slice()),
            schedule,
        })
    }

    pub fn from_summary(summary: &GaussianBelief, schedule: Schedule) -> Result<Self> {
        if summary.mean.len() != 3 || summary.cov.shape() != (3, 3) {
            return Err(Error::Dimension {
                expected: 3,
                got: summary.mean.len(),
            });
        }
        Self::new(
            Vector3::from_column_slice(summary.mean.as_slice()),
            Matrix3::from_column_slice(summary.cov.as_slice()),
            schedule,
        )
    }
}

/// Moments `exp(θ)` read from an augmented state.
pub fn h_vs(x: &DVector<f64>) -> Vector3<f64> {
    theta_unmap(&theta_block(x))
}

/// [`h_vs`] as an observation model.
#[derive(Debug, Clone, Copy, Default)]
pub struct InertiaObservation;

impl ObservationModel for InertiaObservation {
    fn dim(&self) -> usize {
        3
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_column_slice(h_vs(x).as_slice())
    }
}

/// Second correction of step `step`. Returns the input unchanged when the schedule skips the step.
pub fn virtual_update(
    belief: &FilterBelief,
    vs: &VirtualSensor,
    ut: &UtParams,
    step: usize,
) -> Result<FilterBelief> {
    if !vs.schedule.is_due(step) {
        return Ok(belief.clone());
    }
    virtual_update_with(belief, vs, ut, &InertiaObservation)
}

/// Virtual correction through an arbitrary parameter observation.
pub fn virtual_update_with<O: ObservationModel>(
    belief: &FilterBelief,
    vs: &VirtualSensor,
    ut: &UtParams,
    obs: &O,
) -> Result<FilterBelief> {
    let z = DVector::from_column_slice(vs.z.as_slice());
    let r = DMatrix::from_column_slice(3, 3, vs.r.as_slice());
    let mut out = sigma_point_update(belief, &z, obs, &r, ut)?.belief;
    if out.dim() == STATE_DIM {
        normalize_quaternion(&mut out.mean);
    }
    Ok(out)
}

fn normalize_quaternion(x: &mut DVector<f64>) {
    let q = Quaternion::new(x[0], x[1], x[2], x[3]).normalize();
    x[0] = q.w;
    x[1] = q.x;
    x[2] = q.y;
    x[3] = q.z;
}

/// Initialization, noise levels and run length of an estimation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostedConfig {
    /// Prior mean of the moments (kg·m²).
    pub prior_mean: [f64; 3],
    /// Prior covariance diagonal of the moments (kg²·m⁴).
    pub prior_var: [f64; 3],
    pub q0: [f64; 4],
    pub omega0: [f64; 3],
    pub p_quat: f64,
    pub p_rate: f64,
    /// Process noise variance, identical on every state component.
    pub process_var: f64,
    /// Measurement noise variance, identical on every measured component.
    pub meas_var: f64,
    pub ut: UtParams,
    pub schedule: Schedule,
    pub update_sigma: UpdateSigma,
    /// Re-center the log-inertia block after each step. Currently has no effect.
    pub recenter: bool,
    pub horizon: f64,
    pub dt: f64,
    /// Check symmetry and definiteness of the covariance after every step.
    pub strict: bool,
}

impl Default for BoostedConfig {
    fn default() -> Self {
        Self {
            prior_mean: [140.0, 20.0, 36.0],
            prior_var: [1700.0, 20.0, 120.0],
            q0: [1.0, 0.0, 0.0, 0.0],
            omega0: [0.1, 0.1, 0.1],
            p_quat: 1e-3,
            p_rate: 1e-2,
            process_var: 1e-7,
            meas_var: 2.5e-5,
            ut: UtParams::default(),
            schedule: Schedule::default(),
            update_sigma: UpdateSigma::Redraw,
            recenter: false,
            horizon: 400.0,
            dt: 0.01,
            strict: false,
        }
    }
}

impl BoostedConfig {
    /// Number of filter steps covering the horizon.
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// Sensor standard deviation implied by the measurement noise variance.
    pub fn sensor_std(&self) -> f64 {
        self.meas_var.sqrt()
    }

    pub fn process_noise(&self) -> DMatrix<f64> {
        DMatrix::identity(STATE_DIM, STATE_DIM) * self.process_var
    }

    pub fn measurement_noise(&self) -> DMatrix<f64> {
        DMatrix::identity(MEAS_DIM, MEAS_DIM) * self.meas_var
    }

    /// `x̂₀` and `P₀` with the physical moment prior pushed into log coordinates.
    pub fn initial_belief(&self) -> Result<FilterBelief> {
        let (theta, theta_cov) = prior_to_theta(
            &Vector3::from(self.prior_mean),
            &Matrix3::from_diagonal(&Vector3::from(self.prior_var)),
            &self.ut,
        )?;
        let mut mean = DVector::zeros(STATE_DIM);
        mean.rows_mut(0, 4).copy_from_slice(&self.q0);
        mean.rows_mut(4, 3).copy_from_slice(&self.omega0);
        mean.rows_mut(THETA_OFFSET, 3).copy_from(&theta);
        let mut cov = DMatrix::zeros(STATE_DIM, STATE_DIM);
        for i in 0..4 {
            cov[(i, i)] = self.p_quat;
        }
        for i in 4..7 {
            cov[(i, i)] = self.p_rate;
        }
        cov.view_mut((THETA_OFFSET, THETA_OFFSET), (3, 3))
            .copy_from(&theta_cov);
        FilterBelief::new(mean, cov)
    }
}

/// Log-coordinate re-centering hook applied after each step.
fn recenter(_belief: &mut FilterBelief) {}

/// Truth trajectory measurements for one regime.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub truth: InertiaTriple,
    pub regime: Regime,
    pub dt: f64,
    /// Measurements at `t = k·dt`, `k = 1..=steps`.
    pub measurements: Vec<Measurement>,
}

impl Scenario {
    /// Simulate the true body from `q = (1,0,0,0)`, `ω = (0.1,0.1,0.1)` and corrupt it with the sensor noise.
    pub fn simulate(
        cfg: &BoostedConfig,
        truth: InertiaTriple,
        regime: Regime,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let states = propagate(
            &truth,
            &RigidBodyState::reference_initial(),
            &TorqueProfile::new(regime),
            cfg.dt,
            cfg.steps(),
        )?;
        let sigma = cfg.sensor_std();
        let measurements = measure_trajectory(&states, cfg.dt, sigma, sigma, rng);
        Ok(Self {
            truth,
            regime,
            dt: cfg.dt,
            measurements,
        })
    }

    pub fn torque(&self) -> TorqueProfile {
        TorqueProfile::new(self.regime)
    }
}

/// Estimator variants compared in the experiments, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Ekf,
    Ukf,
    Enkf,
    Boosted,
}

impl FilterKind {
    pub const ALL: [FilterKind; 4] = [
        FilterKind::Ekf,
        FilterKind::Ukf,
        FilterKind::Enkf,
        FilterKind::Boosted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Ekf => "ekf",
            FilterKind::Ukf => "ukf",
            FilterKind::Enkf => "enkf",
            FilterKind::Boosted => "boosted",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FilterKind::Ekf => "EKF",
            FilterKind::Ukf => "UKF",
            FilterKind::Enkf => "EnKF",
            FilterKind::Boosted => "Boosted UKF",
        }
    }
}

impl std::str::FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ekf" => Ok(FilterKind::Ekf),
            "ukf" => Ok(FilterKind::Ukf),
            "enkf" => Ok(FilterKind::Enkf),
            "boosted" | "boosted-ukf" | "boosted_ukf" => Ok(FilterKind::Boosted),
            other => Err(Error::Domain(format!("unknown filter '{other}'"))),
        }
    }
}

impl std::fmt::Display for FilterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-step trace of a run, starting with the initial belief at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    pub last: FilterBelief,
}

impl RunTrace {
    /// Final moment estimate `exp(θ̂)`.
    pub fn final_j(&self) -> Vector3<f64> {
        h_vs(&self.last.mean)
    }

    /// Marginal std of the final moments, `J·σ_θ` (kg·m²).
    pub fn final_std(&self) -> Vector3<f64> {
        let j = self.final_j();
        let s = self.last.std();
        Vector3::new(
            j[0] * s[THETA_OFFSET],
            j[1] * s[THETA_OFFSET + 1],
            j[2] * s[THETA_OFFSET + 2],
        )
    }
}

fn check(belief: &FilterBelief, strict: bool, step: usize) -> Result<()> {
    if belief.mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { t: f64::NAN }.at_step(step));
    }
    if strict && !belief.is_valid(1e-12 * belief.cov.amax().max(1.0)) {
        return Err(Error::NotPositiveDefinite.at_step(step));
    }
    Ok(())
}

/// Boosted UKF. With `vs = None` this is the plain UKF.
pub fn run_boosted(
    cfg: &BoostedConfig,
    vs: Option<&VirtualSensor>,
    measurements: &[Measurement],
    torque: TorqueProfile,
) -> Result<RunTrace> {
    let process = RigidBodyProcess { profile: torque };
    let q = cfg.process_noise();
    let r = cfg.measurement_noise();
    let mut belief = cfg.initial_belief()?;
    let mut rows = Vec::with_capacity(measurements.len() + 1);
    rows.push(TraceRow::new(0.0, &belief, 0.0));
    for (k, m) in measurements.iter().enumerate() {
        let t = m.t - cfg.dt;
        let pred = ukf_predict(&belief, &cfg.ut, &process, t, cfg.dt, &q).map_err(|e| e.at_step(k))?;
        let z = measurement_vector(m);
        let up = ukf_update(&pred, &z, &process, &AttitudeObservation, &r, &cfg.ut, cfg.update_sigma)
            .map_err(|e| e.at_step(k))?;
        belief = up.belief;
        if let Some(vs) = vs {
            belief = virtual_update(&belief, vs, &cfg.ut, k).map_err(|e| e.at_step(k))?;
        }
        normalize_quaternion(&mut belief.mean);
        if cfg.recenter {
            recenter(&mut belief);
        }
        belief.cov = condition_covariance(&belief.cov);
        check(&belief, cfg.strict, k)?;
        rows.push(TraceRow::new(m.t, &belief, up.innovation.norm()));
    }
    Ok(RunTrace { rows, last: belief })
}

pub fn run_ukf(cfg: &BoostedConfig, measurements: &[Measurement], torque: TorqueProfile) -> Result<RunTrace> {
    run_boosted(cfg, None, measurements, torque)
}

pub fn run_ekf(cfg: &BoostedConfig, measurements: &[Measurement], torque: TorqueProfile) -> Result<RunTrace> {
    let process = RigidBodyProcess { profile: torque };
    let q = cfg.process_noise();
    let r = cfg.measurement_noise();
    let mut belief = cfg.initial_belief()?;
    let mut rows = Vec::with_capacity(measurements.len() + 1);
    rows.push(TraceRow::new(0.0, &belief, 0.0));
    for (k, m) in measurements.iter().enumerate() {
        let z = measurement_vector(m);
        let up = ekf_step(&belief, &z, m.t - cfg.dt, cfg.dt, &process, &AttitudeObservation, &q, &r)
            .map_err(|e| e.at_step(k))?;
        belief = up.belief;
        check(&belief, cfg.strict, k)?;
        rows.push(TraceRow::new(m.t, &belief, up.innovation.norm()));
    }
    Ok(RunTrace { rows, last: belief })
}

pub fn run_enkf(
    cfg: &BoostedConfig,
    enkf: &EnkfConfig,
    measurements: &[Measurement],
    torque: TorqueProfile,
    rng: &mut RngStream,
) -> Result<RunTrace> {
    let process = RigidBodyProcess { profile: torque };
    let q = cfg.process_noise();
    let r = cfg.measurement_noise();
    let init = cfg.initial_belief()?;
    let mut ensemble = Ensemble::sample(&init, enkf.members, rng)?;
    for m in &mut ensemble.members {
        normalize_quaternion(m);
    }
    let mut rows = Vec::with_capacity(measurements.len() + 1);
    rows.push(TraceRow::new(0.0, &ensemble.belief(), 0.0));
    for (k, m) in measurements.iter().enumerate() {
        let z = measurement_vector(m);
        let (next, innovation) = enkf_step(
            &ensemble,
            &z,
            m.t - cfg.dt,
            cfg.dt,
            &process,
            &AttitudeObservation,
            &q,
            &r,
            enkf,
            rng,
        )
        .map_err(|e| e.at_step(k))?;
        ensemble = next;
        let belief = ensemble.belief();
        if belief.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { t: m.t }.at_step(k));
        }
        rows.push(TraceRow::new(m.t, &belief, innovation.norm()));
    }
    Ok(RunTrace {
        rows,
        last: ensemble.belief(),
    })
}

/// Run one filter on a scenario. `vs` is only used by [`FilterKind::Boosted`]; `rng` only by the EnKF.
pub fn run_filter(
    kind: FilterKind,
    cfg: &BoostedConfig,
    enkf: &EnkfConfig,
    scenario: &Scenario,
    vs: Option<&VirtualSensor>,
    rng: &mut RngStream,
) -> Result<RunTrace> {
    let torque = scenario.torque();
    let ms = &scenario.measurements;
    match kind {
        FilterKind::Ekf => run_ekf(cfg, ms, torque),
        FilterKind::Ukf => run_ukf(cfg, ms, torque),
        FilterKind::Enkf => run_enkf(cfg, enkf, ms, torque, rng),
        FilterKind::Boosted => run_boosted(cfg, vs, ms, torque),
    }
}

/// Signed relative error `(estimate / truth − 1)·100` per axis.
pub fn relative_error_pct(estimate: &Vector3<f64>, truth: &InertiaTriple) -> [f64; 3] {
    let t = truth.to_array();
    [0, 1, 2].map(|i| (estimate[i] / t[i] - 1.0) * 100.0)
}

/// Final-time summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub filter: FilterKind,
    pub regime: Regime,
    pub seed: u64,
    #[serde(rename = "final_J")]
    pub final_j: [f64; 3],
    pub rel_err_pct: [f64; 3],
    pub final_std: [f64; 3],
}

impl RunSummary {
    pub fn new(filter: FilterKind, scenario: &Scenario, seed: u64, trace: &RunTrace) -> Self {
        let j = trace.final_j();
        Self {
            filter,
            regime: scenario.regime,
            seed,
            final_j: [j[0], j[1], j[2]],
            rel_err_pct: relative_error_pct(&j, &scenario.truth),
            final_std: trace.final_std().into(),
        }
    }

    pub fn max_abs_err_pct(&self) -> f64 {
        self.rel_err_pct.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}
