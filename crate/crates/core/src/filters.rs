//! Unscented, extended and ensemble Kalman filters.
//!
//! The filters are generic over a [`ProcessModel`] and an
//! [`ObservationModel`]. The attitude problem uses the 10-dimensional
//! augmented state `[q (4), ω (3), θ (3)]` with `θ = ln J` elementwise.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_body, BodyVector, InertiaTriple, TorqueProfile};
use crate::error::{Error, Result};
use crate::numerics::{
    cholesky_with_retry, condition_covariance, gaussian_sample, solve_spd, symmetrize_jitter, Quaternion,
    RngStream,
};
use crate::sensing::Measurement;

pub const STATE_DIM: usize = 10;
pub const MEAS_DIM: usize = 7;
/// Offset of the log-inertia block in the augmented state.
pub const THETA_OFFSET: usize = 7;

/// Scaled unscented transform parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtWeights {
    pub lambda: f64,
    pub wm: Vec<f64>,
    pub wc: Vec<f64>,
}

impl UtParams {
    pub fn lambda(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (n as f64 + self.kappa) - n as f64
    }

    pub fn weights(&self, n: usize) -> UtWeights {
        let lambda = self.lambda(n);
        let c = n as f64 + lambda;
        let mut wm = vec![1.0 / (2.0 * c); 2 * n + 1];
        let mut wc = wm.clone();
        wm[0] = lambda / c;
        wc[0] = lambda / c + (1.0 - self.alpha * self.alpha + self.beta);
        UtWeights { lambda, wm, wc }
    }
}

/// Gaussian belief over the filter state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FilterBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::Dimension {
                expected: mean.len(),
                got: cov.nrows(),
            });
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Marginal standard deviations.
    pub fn std(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// Symmetric within `tol` and Cholesky-factorizable.
    pub fn is_valid(&self, tol: f64) -> bool {
        crate::numerics::is_symmetric(&self.cov, tol)
            && crate::numerics::cholesky(&self.cov).is_ok()
            && self.mean.iter().all(|v| v.is_finite())
    }
}

/// Discrete-time state transition.
pub trait ProcessModel {
    fn propagate(&self, x: &DVector<f64>, t: f64, dt: f64) -> Result<DVector<f64>>;

    /// Projection applied to posterior means and ensemble members (e.g. quaternion renormalization).
    fn normalize(&self, _x: &mut DVector<f64>) {}
}

pub trait ObservationModel {
    fn dim(&self) -> usize;
    fn observe(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// `x ↦ A x`.
#[derive(Debug, Clone)]
pub struct LinearProcess {
    pub a: DMatrix<f64>,
}

impl ProcessModel for LinearProcess {
    fn propagate(&self, x: &DVector<f64>, _t: f64, _dt: f64) -> Result<DVector<f64>> {
        Ok(&self.a * x)
    }
}

/// `x ↦ H x`.
#[derive(Debug, Clone)]
pub struct LinearObservation {
    pub h: DMatrix<f64>,
}

impl ObservationModel for LinearObservation {
    fn dim(&self) -> usize {
        self.h.nrows()
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x
    }
}

fn normalize_quaternion_block(x: &mut DVector<f64>) {
    let q = Quaternion::new(x[0], x[1], x[2], x[3]).normalize();
    x[0] = q.w;
    x[1] = q.x;
    x[2] = q.y;
    x[3] = q.z;
}

/// RK4 attitude dynamics with `J = exp(θ)` held constant over the step.
#[derive(Debug, Clone, Copy)]
pub struct RigidBodyProcess {
    pub profile: TorqueProfile,
}

impl ProcessModel for RigidBodyProcess {
    fn propagate(&self, x: &DVector<f64>, t: f64, dt: f64) -> Result<DVector<f64>> {
        if x.len() != STATE_DIM {
            return Err(Error::Dimension {
                expected: STATE_DIM,
                got: x.len(),
            });
        }
        let moments = theta_unmap(&theta_block(x));
        let body = BodyVector::from_column_slice(&x.as_slice()[..7]);
        let next = step_body(&moments, &self.profile, &body, t, dt)?;
        let mut out = x.clone();
        out.rows_mut(0, 7).copy_from(&next);
        Ok(out)
    }

    fn normalize(&self, x: &mut DVector<f64>) {
        normalize_quaternion_block(x);
    }
}

/// Direct quaternion and gyro readout of the first seven state components.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttitudeObservation;

impl ObservationModel for AttitudeObservation {
    fn dim(&self) -> usize {
        MEAS_DIM
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(0, MEAS_DIM).into_owned()
    }
}

pub fn theta_block(x: &DVector<f64>) -> Vector3<f64> {
    Vector3::new(x[THETA_OFFSET], x[THETA_OFFSET + 1], x[THETA_OFFSET + 2])
}

/// Elementwise log of positive moments.
pub fn theta_map(j: &Vector3<f64>) -> Result<Vector3<f64>> {
    if j.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Domain(format!("moments must be positive, got {j:?}")));
    }
    Ok(j.map(f64::ln))
}

pub fn theta_unmap(theta: &Vector3<f64>) -> Vector3<f64> {
    theta.map(f64::exp)
}

/// Read out `exp(θ)` as a physical inertia triple (fails if the triangle inequalities are violated).
pub fn theta_to_inertia(theta: &Vector3<f64>) -> Result<InertiaTriple> {
    let j = theta_unmap(theta);
    InertiaTriple::new(j[0], j[1], j[2])
}

/// Push a physical-space Gaussian on the moments through [`theta_map`] with the unscented transform.
pub fn prior_to_theta(
    mean: &Vector3<f64>,
    cov: &Matrix3<f64>,
    ut: &UtParams,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let belief = FilterBelief::new(
        DVector::from_column_slice(mean.as_slice()),
        DMatrix::from_column_slice(3, 3, cov.as_slice()),
    )?;
    let w = ut.weights(3);
    let mapped = sigma_points(&belief, ut)?
        .iter()
        .map(|p| theta_map(&Vector3::new(p[0], p[1], p[2])).map(|t| DVector::from_column_slice(t.as_slice())))
        .collect::<Result<Vec<_>>>()?;
    let m = weighted_mean(&mapped, &w.wm);
    let c = symmetrize_jitter(&weighted_cross_cov(&mapped, &m, &mapped, &m, &w.wc), 0.0);
    Ok((
        Vector3::new(m[0], m[1], m[2]),
        Matrix3::from_column_slice(c.as_slice()),
    ))
}

/// `2n + 1` points: the mean, then `mean ± columns of chol((n + λ)·P)`.
pub fn sigma_points(belief: &FilterBelief, ut: &UtParams) -> Result<Vec<DVector<f64>>> {
    let n = belief.dim();
    let scaled = &belief.cov * (n as f64 + ut.lambda(n));
    let l = cholesky_with_retry(&scaled)?;
    let mut pts = Vec::with_capacity(2 * n + 1);
    pts.push(belief.mean.clone());
    for c in 0..n {
        pts.push(&belief.mean + l.column(c));
    }
    for c in 0..n {
        pts.push(&belief.mean - l.column(c));
    }
    Ok(pts)
}

/// `Σ Wᵢ Xᵢ`, accumulated as offsets from `X₀` (the weights sum to one).
pub fn weighted_mean(points: &[DVector<f64>], wm: &[f64]) -> DVector<f64> {
    let x0 = &points[0];
    let mut acc = DVector::zeros(x0.len());
    for (p, &w) in points.iter().zip(wm).skip(1) {
        acc.axpy(w, &(p - x0), 1.0);
    }
    acc + x0
}

/// `Σ Wᵢ (Xᵢ − x̄)(Yᵢ − ȳ)ᵀ`.
pub fn weighted_cross_cov(
    xs: &[DVector<f64>],
    x_mean: &DVector<f64>,
    ys: &[DVector<f64>],
    y_mean: &DVector<f64>,
    wc: &[f64],
) -> DMatrix<f64> {
    let k = xs.len();
    let dx = DMatrix::from_fn(x_mean.len(), k, |r, c| (xs[c][r] - x_mean[r]) * wc[c]);
    let dy = DMatrix::from_fn(y_mean.len(), k, |r, c| ys[c][r] - y_mean[r]);
    &dx * dy.transpose()
}

/// Predicted belief plus the propagated sigma points it was computed from.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub belief: FilterBelief,
    pub sigma: Vec<DVector<f64>>,
    /// Weighted mean of `sigma` before any normalization.
    pub sigma_mean: DVector<f64>,
}

pub fn ukf_predict<P: ProcessModel>(
    belief: &FilterBelief,
    ut: &UtParams,
    process: &P,
    t: f64,
    dt: f64,
    q: &DMatrix<f64>,
) -> Result<Prediction> {
    let w = ut.weights(belief.dim());
    let sigma = sigma_points(belief, ut)?
        .iter()
        .map(|x| process.propagate(x, t, dt))
        .collect::<Result<Vec<_>>>()?;
    let sigma_mean = weighted_mean(&sigma, &w.wm);
    let cov = weighted_cross_cov(&sigma, &sigma_mean, &sigma, &sigma_mean, &w.wc) + q;
    let mut mean = sigma_mean.clone();
    process.normalize(&mut mean);
    Ok(Prediction {
        belief: FilterBelief {
            mean,
            cov: symmetrize_jitter(&cov, 0.0),
        },
        sigma,
        sigma_mean,
    })
}

/// Posterior after a measurement update, with the innovation `z − ẑ`.
#[derive(Debug, Clone)]
pub struct Update {
    pub belief: FilterBelief,
    pub innovation: DVector<f64>,
}

/// Kalman correction from sigma points `xs` (mean `x_mean`) and their images `zs`.
fn sigma_correction(
    prior: &FilterBelief,
    xs: &[DVector<f64>],
    x_mean: &DVector<f64>,
    zs: &[DVector<f64>],
    z: &DVector<f64>,
    r: &DMatrix<f64>,
    w: &UtWeights,
) -> Result<Update> {
    if z.len() != zs[0].len() || r.shape() != (z.len(), z.len()) {
        return Err(Error::Dimension {
            expected: zs[0].len(),
            got: z.len(),
        });
    }
    let z_hat = weighted_mean(zs, &w.wm);
    let s = weighted_cross_cov(zs, &z_hat, zs, &z_hat, &w.wc) + r;
    let pxz = weighted_cross_cov(xs, x_mean, zs, &z_hat, &w.wc);
    // K = Pxz S⁻¹  ⇔  S Kᵀ = Pxzᵀ.
    let k = solve_spd(&s, &pxz.transpose())?.transpose();
    let innovation = z - z_hat;
    let mean = &prior.mean + &k * &innovation;
    let cov = &prior.cov - &k * &s * k.transpose();
    Ok(Update {
        belief: FilterBelief {
            mean,
            cov: symmetrize_jitter(&cov, 0.0),
        },
        innovation,
    })
}

/// Which sigma points feed the measurement update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateSigma {
    /// Rebuild sigma points about the predicted belief, so `Q` enters `S` and `P_xz`.
    #[default]
    Redraw,
    /// Reuse the propagated sigma points (process noise is then absent from `S` and `P_xz`).
    Propagated,
}

pub fn ukf_update<P: ProcessModel, O: ObservationModel>(
    pred: &Prediction,
    z: &DVector<f64>,
    process: &P,
    obs: &O,
    r: &DMatrix<f64>,
    ut: &UtParams,
    mode: UpdateSigma,
) -> Result<Update> {
    let w = ut.weights(pred.belief.dim());
    let (xs, x_mean) = match mode {
        UpdateSigma::Redraw => {
            let xs = sigma_points(&pred.belief, ut)?;
            let m = weighted_mean(&xs, &w.wm);
            (xs, m)
        }
        UpdateSigma::Propagated => (pred.sigma.clone(), pred.sigma_mean.clone()),
    };
    let zs: Vec<_> = xs.iter().map(|x| obs.observe(x)).collect();
    let mut up = sigma_correction(&pred.belief, &xs, &x_mean, &zs, z, r, &w)?;
    process.normalize(&mut up.belief.mean);
    Ok(up)
}

/// Second correction with sigma points rebuilt about `belief`.
pub fn sigma_point_update<O: ObservationModel>(
    belief: &FilterBelief,
    z: &DVector<f64>,
    obs: &O,
    r: &DMatrix<f64>,
    ut: &UtParams,
) -> Result<Update> {
    let w = ut.weights(belief.dim());
    let xs = sigma_points(belief, ut)?;
    let x_mean = weighted_mean(&xs, &w.wm);
    let zs: Vec<_> = xs.iter().map(|x| obs.observe(x)).collect();
    sigma_correction(belief, &xs, &x_mean, &zs, z, r, &w)
}

/// Central-difference Jacobian with per-component step `rel · max(|xⱼ|, 1)`.
pub fn numerical_jacobian<F>(f: F, x: &DVector<f64>, rel: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let h = rel * x[j].abs().max(1.0);
        let mut xp = x.clone();
        xp[j] += h;
        let mut xm = x.clone();
        xm[j] -= h;
        cols.push((f(&xp)? - f(&xm)?) / (2.0 * h));
    }
    Ok(DMatrix::from_columns(&cols))
}

pub const JACOBIAN_STEP: f64 = 1e-6;

/// One predict/correct cycle of the extended Kalman filter.
#[allow(clippy::too_many_arguments)]
pub fn ekf_step<P: ProcessModel, O: ObservationModel>(
    belief: &FilterBelief,
    z: &DVector<f64>,
    t: f64,
    dt: f64,
    process: &P,
    obs: &O,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<Update> {
    let f = numerical_jacobian(|x| process.propagate(x, t, dt), &belief.mean, JACOBIAN_STEP)?;
    let mut x_pred = process.propagate(&belief.mean, t, dt)?;
    process.normalize(&mut x_pred);
    let p_pred = condition_covariance(&(&f * &belief.cov * f.transpose() + q));

    let h = numerical_jacobian(|x| Ok(obs.observe(x)), &x_pred, JACOBIAN_STEP)?;
    let s = &h * &p_pred * h.transpose() + r;
    let pxz = &p_pred * h.transpose();
    let k = solve_spd(&s, &pxz.transpose())?.transpose();
    let innovation = z - obs.observe(&x_pred);
    let mut mean = x_pred + &k * &innovation;
    process.normalize(&mut mean);
    let cov = condition_covariance(&(&p_pred - &k * &s * k.transpose()));
    Ok(Update {
        belief: FilterBelief { mean, cov },
        innovation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnkfConfig {
    pub members: usize,
    /// Minimum per-component ensemble std before the run is declared collapsed; `None` disables the check.
    pub collapse_tol: Option<f64>,
}

impl Default for EnkfConfig {
    fn default() -> Self {
        Self {
            members: 100,
            collapse_tol: Some(1e-14),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<DVector<f64>>,
}

impl Ensemble {
    /// Draw members from a Gaussian belief.
    pub fn sample(belief: &FilterBelief, size: usize, rng: &mut RngStream) -> Result<Self> {
        if size < 2 {
            return Err(Error::Domain("ensemble needs at least two members".into()));
        }
        let members = (0..size)
            .map(|_| gaussian_sample(rng, &belief.mean, &belief.cov))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { members })
    }

    pub fn mean(&self) -> DVector<f64> {
        let n = self.members.len() as f64;
        self.members
            .iter()
            .fold(DVector::zeros(self.members[0].len()), |acc, m| acc + m)
            / n
    }

    /// Sample covariance with the `N − 1` normalization.
    pub fn belief(&self) -> FilterBelief {
        let mean = self.mean();
        let k = self.members.len();
        let d = DMatrix::from_fn(mean.len(), k, |r, c| self.members[c][r] - mean[r]);
        let cov = &d * d.transpose() / (k as f64 - 1.0);
        FilterBelief { mean, cov }
    }

    fn max_spread(&self) -> f64 {
        self.belief().std().max()
    }
}

/// Stochastic EnKF step with perturbed observations.
#[allow(clippy::too_many_arguments)]
pub fn enkf_step<P: ProcessModel, O: ObservationModel>(
    ensemble: &Ensemble,
    z: &DVector<f64>,
    t: f64,
    dt: f64,
    process: &P,
    obs: &O,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    cfg: &EnkfConfig,
    rng: &mut RngStream,
) -> Result<(Ensemble, DVector<f64>)> {
    let n = ensemble.members.len();
    if n < 2 {
        return Err(Error::Domain("ensemble needs at least two members".into()));
    }
    let dim = ensemble.members[0].len();
    let zero_state = DVector::zeros(dim);
    let mut forecast = Vec::with_capacity(n);
    for m in &ensemble.members {
        let mut x = process.propagate(m, t, dt)? + gaussian_sample(rng, &zero_state, q)?;
        process.normalize(&mut x);
        forecast.push(x);
    }
    let forecast = Ensemble { members: forecast };
    if let Some(tol) = cfg.collapse_tol {
        let spread = forecast.max_spread();
        if spread < tol {
            return Err(Error::EnsembleCollapse { spread });
        }
    }

    let zs: Vec<DVector<f64>> = forecast.members.iter().map(|x| obs.observe(x)).collect();
    let x_mean = forecast.mean();
    let z_mean = zs.iter().fold(DVector::zeros(z.len()), |acc, v| acc + v) / n as f64;
    let scale = 1.0 / (n as f64 - 1.0);
    let dx = DMatrix::from_fn(dim, n, |r_, c| forecast.members[c][r_] - x_mean[r_]);
    let dz = DMatrix::from_fn(z.len(), n, |r_, c| zs[c][r_] - z_mean[r_]);
    let pxz = &dx * dz.transpose() * scale;
    let pzz = &dz * dz.transpose() * scale + r;
    let k = solve_spd(&pzz, &pxz.transpose())?.transpose();

    let zero_meas = DVector::zeros(z.len());
    let mut members = Vec::with_capacity(n);
    for (x, zi) in forecast.members.iter().zip(&zs) {
        let perturbed = z + gaussian_sample(rng, &zero_meas, r)?;
        let mut xa = x + &k * (perturbed - zi);
        process.normalize(&mut xa);
        members.push(xa);
    }
    Ok((Ensemble { members }, z - z_mean))
}

/// One row of a filter trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `exp(θ)` of the mean.
    pub j: [f64; 3],
    pub innovation_norm: f64,
}

impl TraceRow {
    pub fn new(t: f64, belief: &FilterBelief, innovation_norm: f64) -> Self {
        let j = if belief.dim() == STATE_DIM {
            let v = theta_unmap(&theta_block(&belief.mean));
            [v[0], v[1], v[2]]
        } else {
            [f64::NAN; 3]
        };
        Self {
            t,
            mean: belief.mean.iter().copied().collect(),
            std: belief.std().iter().copied().collect(),
            j,
            innovation_norm,
        }
    }
}

const STATE_NAMES: [&str; STATE_DIM] = [
    "qw", "qx", "qy", "qz", "wx", "wy", "wz", "theta_x", "theta_y", "theta_z",
];

/// Per-step trace CSV: `t`, means, marginal stds, estimated moments, innovation norm.
pub fn write_trace_csv<W: Write>(mut w: W, rows: &[TraceRow], preamble: &[String]) -> Result<()> {
    for line in preamble {
        writeln!(w, "# {line}")?;
    }
    let mut header = vec!["t".to_string()];
    header.extend(STATE_NAMES.iter().map(|n| n.to_string()));
    header.extend(STATE_NAMES.iter().map(|n| format!("std_{n}")));
    header.extend(["Jx", "Jy", "Jz", "innovation_norm"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let mut fields = vec![row.t.to_string()];
        fields.extend(row.mean.iter().map(f64::to_string));
        fields.extend(row.std.iter().map(f64::to_string));
        fields.extend(row.j.iter().map(f64::to_string));
        fields.push(row.innovation_norm.to_string());
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Measurement as a dynamic vector.
pub fn measurement_vector(m: &Measurement) -> DVector<f64> {
    DVector::from_column_slice(m.z.as_slice())
}
