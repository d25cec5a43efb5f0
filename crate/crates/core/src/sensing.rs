//! Synthetic sensors and the reliability-scored inertia dataset.
//!
//! The dataset pipeline integrates a torque-free reference trajectory for the
//! nominal inertia, corrupts it with gyro noise, integrates one surrogate
//! trajectory per sampled inertia and scores each surrogate by its mean
//! squared angular-velocity error against the noisy measurement.

use std::path::Path;

use nalgebra::{SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{propagate, InertiaTriple, RigidBodyState, TorqueProfile};
use crate::error::{Error, Result};
use crate::numerics::{Quaternion, RngStream};

/// Stacked `[q (4), ω (3)]` measurement.
pub type MeasurementVector = SVector<f64, 7>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub t: f64,
    pub z: MeasurementVector,
}

/// Noisy quaternion + gyro reading of `x` at time `t`.
///
/// Seven normals are drawn regardless of the noise levels so streams stay
/// aligned across noise settings. With `sigma_quat == 0` the quaternion is
/// passed through untouched.
pub fn measure(
    x: &RigidBodyState,
    t: f64,
    sigma_quat: f64,
    sigma_gyro: f64,
    rng: &mut RngStream,
) -> Measurement {
    let mut noise = [0.0; 7];
    for v in &mut noise {
        *v = rng.normal();
    }
    let q = if sigma_quat == 0.0 {
        x.q
    } else {
        Quaternion::new(
            x.q.w + sigma_quat * noise[0],
            x.q.x + sigma_quat * noise[1],
            x.q.y + sigma_quat * noise[2],
            x.q.z + sigma_quat * noise[3],
        )
        .normalize()
    };
    let w = x.omega + Vector3::new(noise[4], noise[5], noise[6]) * sigma_gyro;
    Measurement {
        t,
        z: MeasurementVector::from_column_slice(&[q.w, q.x, q.y, q.z, w[0], w[1], w[2]]),
    }
}

/// Measure every state of a trajectory sampled at `dt`, skipping the initial state.
pub fn measure_trajectory(
    states: &[RigidBodyState],
    dt: f64,
    sigma_quat: f64,
    sigma_gyro: f64,
    rng: &mut RngStream,
) -> Vec<Measurement> {
    states
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, s)| measure(s, k as f64 * dt, sigma_quat, sigma_gyro, rng))
        .collect()
}

/// Gaussian distribution over principal moments used to draw surrogate inertias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InertiaPrior {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl InertiaPrior {
    /// 10% relative deviation around diag(100, 80, 70).
    pub const NOMINAL: InertiaPrior = InertiaPrior {
        mean: [100.0, 80.0, 70.0],
        std: [10.0, 8.0, 7.0],
    };
}

const MAX_REJECTIONS: usize = 1000;

/// Draw `n` physical inertia triples from `prior`, rejecting invalid draws.
pub fn sample_inertias_from(
    prior: &InertiaPrior,
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<InertiaTriple>> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut rejected = 0;
        loop {
            let draw: [f64; 3] = std::array::from_fn(|i| prior.mean[i] + prior.std[i] * rng.normal());
            if let Ok(j) = InertiaTriple::from_array(draw) {
                out.push(j);
                break;
            }
            rejected += 1;
            if rejected >= MAX_REJECTIONS {
                return Err(Error::ResampleLimit(rejected));
            }
        }
    }
    Ok(out)
}

pub fn sample_inertias(n: usize, rng: &mut RngStream) -> Result<Vec<InertiaTriple>> {
    sample_inertias_from(&InertiaPrior::NOMINAL, n, rng)
}

/// Mean squared angular-velocity error `(1/M) Σ ‖ω_s − ω_m‖²`.
pub fn reliability_error(omega_s: &[Vector3<f64>], omega_m: &[Vector3<f64>]) -> Result<f64> {
    if omega_s.len() != omega_m.len() {
        return Err(Error::Dimension {
            expected: omega_m.len(),
            got: omega_s.len(),
        });
    }
    if omega_s.is_empty() {
        return Err(Error::Dimension {
            expected: 1,
            got: 0,
        });
    }
    let sum: f64 = omega_s
        .iter()
        .zip(omega_m)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok(sum / omega_s.len() as f64)
}

/// Role of a sample in the reweighting pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Meta,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub id: usize,
    #[serde(flatten)]
    pub j: InertiaTriple,
    /// Mean squared trajectory error, (rad/s)².
    pub e: f64,
    /// Standardized error `(e − μ_e)/σ_e`.
    pub z: f64,
    /// 1 when `e` exceeds the dataset median.
    pub label: u8,
    pub weight: f64,
    #[serde(default)]
    pub raw_weight: f64,
    pub split: Split,
}

/// Settings of the dataset pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n: usize,
    /// Gyro noise added to the reference trajectory, rad/s.
    pub sigma: f64,
    pub dt: f64,
    /// Number of snapshots `t_k = k·dt`, `k = 1..=m`.
    pub m: usize,
    pub meta_fraction: f64,
    pub test_fraction: f64,
}

impl DatasetConfig {
    pub fn new(n: usize, sigma: f64) -> Self {
        Self {
            n,
            sigma,
            dt: 0.05,
            m: 600,
            meta_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedDataset {
    pub seed: u64,
    pub sigma: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub n: usize,
    pub samples: Vec<TrainingSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<crate::provenance::Provenance>,
}

impl WeightedDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    /// Inertias and weights of the training split, in storage order.
    pub fn weighted_train(&self) -> (Vec<InertiaTriple>, Vec<f64>) {
        self.samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| (s.j, s.weight))
            .unzip()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Median of a nonempty slice (mean of the two central values for even length).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Binary labels `e > median(e)`.
pub fn median_labels(errors: &[f64]) -> Vec<u8> {
    let med = median(errors);
    errors.iter().map(|&e| u8::from(e > med)).collect()
}

/// Standardize with the population standard deviation; constant input maps to zeros.
pub fn z_scores(errors: &[f64]) -> Vec<f64> {
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return vec![0.0; errors.len()];
    }
    errors.iter().map(|e| (e - mean) / std).collect()
}

/// Angular-velocity snapshots `ω(t_k)`, `k = 1..=m`, of a torque-free run from the reference initial state.
pub fn torque_free_rates(j: &InertiaTriple, dt: f64, m: usize) -> Result<Vec<Vector3<f64>>> {
    let traj = propagate(j, &RigidBodyState::reference_initial(), &TorqueProfile::zero(), dt, m)?;
    Ok(traj[1..].iter().map(|s| s.omega).collect())
}

/// Run the dataset pipeline with freshly sampled surrogate inertias.
pub fn build_dataset(cfg: &DatasetConfig, rng: &mut RngStream) -> Result<WeightedDataset> {
    if cfg.n == 0 {
        return Err(Error::Domain("dataset size must be at least 1".into()));
    }
    let mut noise_rng = RngStream::new(rng.next_u64());
    let mut inertia_rng = RngStream::new(rng.next_u64());
    let mut split_rng = RngStream::new(rng.next_u64());
    let inertias = sample_inertias(cfg.n, &mut inertia_rng)?;
    let measured = noisy_reference(cfg, &mut noise_rng)?;
    assemble(cfg, rng.seed(), &inertias, &measured, &mut split_rng)
}

/// Run the dataset pipeline on caller-supplied surrogate inertias.
pub fn build_dataset_from(
    cfg: &DatasetConfig,
    inertias: &[InertiaTriple],
    rng: &mut RngStream,
) -> Result<WeightedDataset> {
    if inertias.is_empty() {
        return Err(Error::Domain("dataset size must be at least 1".into()));
    }
    let mut noise_rng = RngStream::new(rng.next_u64());
    let _ = rng.next_u64();
    let mut split_rng = RngStream::new(rng.next_u64());
    let measured = noisy_reference(cfg, &mut noise_rng)?;
    let cfg = DatasetConfig {
        n: inertias.len(),
        ..cfg.clone()
    };
    assemble(&cfg, rng.seed(), inertias, &measured, &mut split_rng)
}

fn noisy_reference(cfg: &DatasetConfig, rng: &mut RngStream) -> Result<Vec<Vector3<f64>>> {
    let reference = torque_free_rates(&InertiaTriple::NOMINAL, cfg.dt, cfg.m)?;
    Ok(reference
        .iter()
        .map(|w| {
            let eta = Vector3::new(rng.normal(), rng.normal(), rng.normal());
            w + eta * cfg.sigma
        })
        .collect())
}

fn assemble(
    cfg: &DatasetConfig,
    seed: u64,
    inertias: &[InertiaTriple],
    measured: &[Vector3<f64>],
    split_rng: &mut RngStream,
) -> Result<WeightedDataset> {
    let n = inertias.len();
    let errors = inertias
        .iter()
        .map(|j| reliability_error(&torque_free_rates(j, cfg.dt, cfg.m)?, measured))
        .collect::<Result<Vec<_>>>()?;
    let z = z_scores(&errors);
    let labels = median_labels(&errors);
    let splits = assign_splits(&errors, cfg.meta_fraction, cfg.test_fraction, split_rng);
    let n_train = splits.iter().filter(|s| **s == Split::Train).count();

    let samples = (0..n)
        .map(|i| {
            let weight = if splits[i] == Split::Train {
                1.0 / n_train as f64
            } else {
                0.0
            };
            TrainingSample {
                id: i,
                j: inertias[i],
                e: errors[i],
                z: z[i],
                label: labels[i],
                weight,
                raw_weight: weight,
                split: splits[i],
            }
        })
        .collect();
    Ok(WeightedDataset {
        seed,
        sigma: cfg.sigma,
        m: cfg.m,
        n,
        samples,
        provenance: None,
    })
}

/// Meta set = lowest-error `meta_fraction`, test = random `test_fraction` of the rest, train = remainder.
///
/// For `n ≥ 2` the meta and train splits are both nonempty.
pub fn assign_splits(
    errors: &[f64],
    meta_fraction: f64,
    test_fraction: f64,
    rng: &mut RngStream,
) -> Vec<Split> {
    let n = errors.len();
    let mut splits = vec![Split::Train; n];
    if n < 2 {
        return splits;
    }
    let n_meta = ((meta_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let n_test = ((test_fraction * n as f64).floor() as usize).min(n - n_meta - 1);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| errors[a].total_cmp(&errors[b]).then(a.cmp(&b)));
    for &i in &order[..n_meta] {
        splits[i] = Split::Meta;
    }
    let mut rest: Vec<usize> = order[n_meta..].to_vec();
    rest.sort_unstable();
    rng.shuffle(&mut rest);
    for &i in &rest[..n_test] {
        splits[i] = Split::Test;
    }
    splits
}
