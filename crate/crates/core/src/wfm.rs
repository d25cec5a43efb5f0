//! Weighted flow matching over the inertia parameter space.
//!
//! A time-dependent vector field `v(s, x)` is regressed onto the velocity of a
//! regularized straight-line path from a standard normal draw `x0` to a data
//! point `x1`. Integrating the field from `s = 0` to `s = 1` transports fresh
//! normal draws to the (weighted) data distribution.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::{adam_step, time_encoding_into, Activation, AdamState, Gradients, MlpCheckpoint, MlpParams};
use crate::numerics::{condition_covariance, rk4_step, RngStream};
use crate::sensing::WeightedDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    /// Adam learning rate.
    pub lr: f64,
    pub eps_min: f64,
    pub batch_size: usize,
    /// RK4 steps on `[0, 1]` when sampling.
    pub ode_steps: usize,
    pub hidden: Vec<usize>,
    pub encoding_pairs: usize,
    /// Work in coordinates shifted and scaled by the unweighted data mean and std.
    pub standardize: bool,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10_000,
            lr: 1e-5,
            eps_min: 1e-3,
            batch_size: 256,
            ode_steps: 100,
            hidden: vec![256; 5],
            encoding_pairs: 8,
            standardize: true,
        }
    }
}

impl FlowTrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.eps_min > 0.0 && self.eps_min < 1.0) {
            return Err(Error::Domain(format!("eps_min must lie in (0, 1), got {}", self.eps_min)));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.ode_steps == 0 || self.encoding_pairs == 0 {
            return Err(Error::Domain(format!("invalid flow config {self:?}")));
        }
        Ok(())
    }
}

/// `(1 − (1 − ε)s)·x0 + s·x1`.
pub fn ot_interpolate(x0: &DVector<f64>, x1: &DVector<f64>, s: f64, eps_min: f64) -> DVector<f64> {
    x0 * (1.0 - (1.0 - eps_min) * s) + x1 * s
}

/// Eulerian path velocity `(x1 − (1 − ε)x) / (1 − (1 − ε)s)` at the path point
/// `x = x(s)`; equals `x1 − (1 − ε)x0` for every `s`.
pub fn target_velocity(x0: &DVector<f64>, x1: &DVector<f64>, s: f64, eps_min: f64) -> DVector<f64> {
    let xs = ot_interpolate(x0, x1, s, eps_min);
    (x1 - xs * (1.0 - eps_min)) / (1.0 - (1.0 - eps_min) * s)
}

/// Vector field `v(s, x; Θ)` with input `[x ‖ time encoding of s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub params: MlpParams,
    pub d: usize,
    pub eps_min: f64,
    pub encoding_pairs: usize,
    /// Physical point = `shift + scale ⊙ model point`.
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub seed: u64,
    pub step: u64,
}

impl FlowField {
    /// Field in unscaled coordinates around an existing network.
    pub fn new(params: MlpParams, eps_min: f64, encoding_pairs: usize) -> Result<Self> {
        let d = params.output_dim();
        if params.input_dim() != d + 2 * encoding_pairs {
            return Err(Error::Dimension {
                expected: d + 2 * encoding_pairs,
                got: params.input_dim(),
            });
        }
        Ok(Self {
            params,
            d,
            eps_min,
            encoding_pairs,
            shift: vec![0.0; d],
            scale: vec![1.0; d],
            seed: 0,
            step: 0,
        })
    }

    /// Network input for points `y` (`d × B`) at per-column times `s`.
    fn input(&self, y: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
        let rows = self.d + 2 * self.encoding_pairs;
        let mut input = DMatrix::zeros(rows, y.ncols());
        for (c, mut col) in input.column_iter_mut().enumerate() {
            let col = col.as_mut_slice();
            col[..self.d].copy_from_slice(y.column(c).as_slice());
            time_encoding_into(s[c], &mut col[self.d..]);
        }
        input
    }

    /// Velocity at time `s` for every column of `y`, in model coordinates.
    pub fn velocity(&self, s: f64, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.params.forward_batch(&self.input(y, &vec![s; y.ncols()]))
    }

    pub fn to_physical(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(y.nrows(), y.ncols(), |r, c| self.shift[r] + self.scale[r] * y[(r, c)])
    }

    pub fn to_model(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| (x[(r, c)] - self.shift[r]) / self.scale[r])
    }

    pub fn to_checkpoint(&self) -> FlowCheckpoint {
        FlowCheckpoint {
            network: self.params.to_checkpoint(self.seed, self.step),
            d: self.d,
            eps_min: self.eps_min,
            encoding_pairs: self.encoding_pairs,
            shift: self.shift.clone(),
            scale: self.scale.clone(),
        }
    }

    pub fn from_checkpoint(ck: &FlowCheckpoint) -> Result<Self> {
        let mut field = Self::new(MlpParams::from_checkpoint(&ck.network)?, ck.eps_min, ck.encoding_pairs)?;
        if field.d != ck.d || ck.shift.len() != ck.d || ck.scale.len() != ck.d {
            return Err(Error::Dimension {
                expected: field.d,
                got: ck.d,
            });
        }
        field.shift = ck.shift.clone();
        field.scale = ck.scale.clone();
        field.seed = ck.network.seed;
        field.step = ck.network.step;
        Ok(field)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCheckpoint {
    pub network: MlpCheckpoint,
    pub d: usize,
    pub eps_min: f64,
    pub encoding_pairs: usize,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Training pairs in model coordinates; each column is one `(x0, x1, s, w)` element.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatch {
    pub x0: DMatrix<f64>,
    pub x1: DMatrix<f64>,
    pub s: Vec<f64>,
    pub w: Vec<f64>,
}

impl FlowBatch {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Path points and target velocities, `d × B` each.
    pub fn path(&self, eps_min: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let a = 1.0 - eps_min;
        let (d, b) = self.x0.shape();
        let mut xs = DMatrix::zeros(d, b);
        let mut u = DMatrix::zeros(d, b);
        for c in 0..b {
            let s = self.s[c];
            let denom = 1.0 - a * s;
            for r in 0..d {
                let (x0, x1) = (self.x0[(r, c)], self.x1[(r, c)]);
                let x = denom * x0 + s * x1;
                xs[(r, c)] = x;
                u[(r, c)] = (x1 - a * x) / denom;
            }
        }
        (xs, u)
    }
}

fn residuals(field: &FlowField, batch: &FlowBatch) -> Result<(crate::neuralnet::Trace, DMatrix<f64>)> {
    let (xs, u) = batch.path(field.eps_min);
    let trace = field.params.forward_trace(&field.input(&xs, &batch.s))?;
    let r = trace.output() - u;
    Ok((trace, r))
}

/// `Σ wₖ ‖v − u‖² / Σ wₖ` and its parameter gradient.
pub fn wfm_loss(field: &FlowField, batch: &FlowBatch) -> Result<(f64, Gradients)> {
    let total: f64 = batch.w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateBatch);
    }
    let (trace, mut r) = residuals(field, batch)?;
    let mut loss = 0.0;
    for (c, mut col) in r.column_iter_mut().enumerate() {
        let w = batch.w[c];
        loss += w * col.norm_squared();
        col *= 2.0 * w / total;
    }
    let (g, _) = field.params.backward_batch(&trace, r)?;
    Ok((loss / total, g))
}

/// Unweighted mean `‖v − u‖²` over the batch.
pub fn fm_loss(field: &FlowField, batch: &FlowBatch) -> Result<f64> {
    let (_, r) = residuals(field, batch)?;
    let sum: f64 = r.column_iter().map(|c| c.norm_squared()).sum();
    Ok(sum / batch.len() as f64)
}

/// Cumulative-weight sampler over data columns.
struct Resampler {
    cumulative: Vec<f64>,
}

impl Resampler {
    fn new(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Domain("weights must be finite and nonnegative".into()));
        }
        let mut acc = 0.0;
        let cumulative: Vec<f64> = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        if !(acc > 0.0) {
            return Err(Error::DegenerateBatch);
        }
        Ok(Self { cumulative })
    }

    fn draw(&self, rng: &mut RngStream) -> usize {
        let total = *self.cumulative.last().unwrap();
        let target = rng.uniform() * total;
        let i = self.cumulative.partition_point(|&c| c <= target);
        // Guard against landing past the end through rounding, and skip zero-weight tails.
        let mut i = i.min(self.cumulative.len() - 1);
        while i > 0 && self.cumulative[i] == self.cumulative[i - 1] {
            i -= 1;
        }
        i
    }
}

/// Per-dimension mean and population std of the columns of `points`; zero std maps to 1.
fn column_moments(points: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let m = points.ncols() as f64;
    let mean: Vec<f64> = points.row_iter().map(|r| r.sum() / m).collect();
    let std = points
        .row_iter()
        .zip(&mean)
        .map(|(r, mu)| {
            let s = (r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m).sqrt();
            if s > 0.0 && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// Train a field on the columns of `points` (`d × M`) with per-column weights.
///
/// Each minibatch element pairs a fresh standard normal draw with a data point
/// resampled in proportion to its weight and a uniform time. Returns the field
/// and the mean minibatch loss of every epoch.
pub fn wfm_train_points(
    points: &DMatrix<f64>,
    weights: &[f64],
    cfg: &FlowTrainConfig,
    rng: &mut RngStream,
) -> Result<(FlowField, Vec<f64>)> {
    cfg.validate()?;
    let (d, m) = points.shape();
    if m == 0 || weights.len() != m {
        return Err(Error::Dimension { expected: m, got: weights.len() });
    }
    let resampler = Resampler::new(weights)?;
    let seed = rng.seed();
    let mut init_rng = RngStream::new(rng.next_u64());
    let mut batch_rng = RngStream::new(rng.next_u64());

    let mut widths = vec![d + 2 * cfg.encoding_pairs];
    widths.extend(&cfg.hidden);
    widths.push(d);
    let mut params = MlpParams::new(&widths, Activation::Relu, &mut init_rng)?;
    params.zero_output_layer();
    let mut field = FlowField::new(params, cfg.eps_min, cfg.encoding_pairs)?;
    field.seed = seed;
    if cfg.standardize {
        let (shift, scale) = column_moments(points);
        field.shift = shift;
        field.scale = scale;
    }
    let data = field.to_model(points);

    let mut adam = AdamState::new(&field.params);
    let batches_per_epoch = m.div_ceil(cfg.batch_size);
    let b = cfg.batch_size;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..batches_per_epoch {
            let x0 = DMatrix::from_fn(d, b, |_, _| batch_rng.normal());
            let mut x1 = DMatrix::zeros(d, b);
            let mut s = Vec::with_capacity(b);
            for c in 0..b {
                let j = resampler.draw(&mut batch_rng);
                x1.set_column(c, &data.column(j));
                s.push(batch_rng.uniform());
            }
            let batch = FlowBatch { x0, x1, s, w: vec![1.0; b] };
            let (loss, g) = wfm_loss(&field, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { t: field.step as f64 });
            }
            adam_step(&mut field.params, &g, cfg.lr, &mut adam)?;
            field.step += 1;
            epoch_loss += loss;
        }
        history.push(epoch_loss / batches_per_epoch as f64);
    }
    Ok((field, history))
}

/// Train on the inertia triples and weights of the dataset's training split.
pub fn wfm_train(
    dataset: &WeightedDataset,
    cfg: &FlowTrainConfig,
    rng: &mut RngStream,
) -> Result<(FlowField, Vec<f64>)> {
    let (inertias, weights) = dataset.weighted_train();
    let points = DMatrix::from_fn(3, inertias.len(), |r, c| inertias[c].to_array()[r]);
    wfm_train_points(&points, &weights, cfg, rng)
}

/// Integrate model-coordinate start points `y0` (`d × m`) to `s = 1`; returns model coordinates.
pub fn integrate(field: &FlowField, y0: &DMatrix<f64>, steps: usize) -> Result<DMatrix<f64>> {
    let (d, m) = y0.shape();
    if d != field.d {
        return Err(Error::Dimension { expected: field.d, got: d });
    }
    let h = 1.0 / steps as f64;
    let mut y = DVector::from_column_slice(y0.as_slice());
    for k in 0..steps {
        let s0 = k as f64 * h;
        y = rk4_step(
            |s, yv: &DVector<f64>| {
                let ym = DMatrix::from_column_slice(d, m, yv.as_slice());
                let v = field.velocity(s, &ym).expect("dimensions checked above");
                DVector::from_column_slice(v.as_slice())
            },
            &y,
            s0,
            h,
        )?;
    }
    Ok(DMatrix::from_column_slice(d, m, y.as_slice()))
}

/// Draw `m` standard normal start points (column-major order) and transport
/// them to `s = 1`. Returns physical coordinates, one sample per column.
pub fn wfm_sample(field: &FlowField, m: usize, steps: usize, rng: &mut RngStream) -> Result<DMatrix<f64>> {
    if m == 0 || steps == 0 {
        return Err(Error::Domain("sampling needs m ≥ 1 and at least one step".into()));
    }
    let mut y0 = DMatrix::zeros(field.d, m);
    for v in y0.iter_mut() {
        *v = rng.normal();
    }
    Ok(field.to_physical(&integrate(field, &y0, steps)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sample mean and conditioned unbiased covariance of the columns of `samples`.
pub fn gaussian_summary(samples: &DMatrix<f64>) -> Result<GaussianBelief> {
    let (d, m) = samples.shape();
    if m < 2 {
        return Err(Error::Domain(format!("need at least two samples, got {m}")));
    }
    let mean = samples.column_mean();
    let mut centered = samples.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let mut cov = DMatrix::zeros(d, d);
    cov.gemm(1.0 / (m - 1) as f64, &centered, &centered.transpose(), 0.0);
    Ok(GaussianBelief {
        mean,
        cov: condition_covariance(&cov),
    })
}

/// Exported virtual-sensor summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WfmSummary {
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub m: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<crate::provenance::Provenance>,
}

impl WfmSummary {
    pub fn new(belief: &GaussianBelief, m: usize, seed: u64) -> Self {
        Self {
            mu: belief.mean.iter().copied().collect(),
            sigma: belief.cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
            m,
            seed,
            provenance: None,
        }
    }

    pub fn belief(&self) -> Result<GaussianBelief> {
        let d = self.mu.len();
        if self.sigma.len() != d || self.sigma.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension { expected: d, got: self.sigma.len() });
        }
        Ok(GaussianBelief {
            mean: DVector::from_column_slice(&self.mu),
            cov: DMatrix::from_fn(d, d, |r, c| self.sigma[r][c]),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
