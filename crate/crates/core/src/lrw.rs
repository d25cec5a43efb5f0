//! Learning to reweight: per-sample reliability weights from the sensitivity
//! of a clean validation loss to per-sample loss perturbations.
//!
//! The classifier maps a sample's standardized error `z` to the logit of its
//! "unreliable" label. Validation batches come from the meta split.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::{bce_loss, sgd_step, Activation, Gradients, MlpParams};
use crate::numerics::RngStream;
use crate::sensing::{Split, WeightedDataset};

/// `(feature, label)` pair.
pub type Example = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrwConfig {
    pub epochs: usize,
    /// Step size of the virtual inner update and of the outer update.
    pub meta_lr: f64,
    /// Step size of the unweighted reference run.
    pub baseline_lr: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
}

impl Default for LrwConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            meta_lr: 3e-4,
            baseline_lr: 1e-4,
            batch_size: 32,
            hidden: vec![64, 32],
        }
    }
}

impl LrwConfig {
    fn validate(&self) -> Result<()> {
        if !(self.meta_lr > 0.0 && self.baseline_lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Domain(format!("invalid LRW config {self:?}")));
        }
        Ok(())
    }

    pub fn classifier(&self, rng: &mut RngStream) -> Result<MlpParams> {
        let mut widths = vec![1];
        widths.extend(&self.hidden);
        widths.push(1);
        MlpParams::new(&widths, Activation::Relu, rng)
    }
}

fn logit(params: &MlpParams, x: f64) -> Result<f64> {
    Ok(params.forward(&DVector::from_element(1, x))?[0])
}

/// Per-sample losses `ℓₙ` and gradients `∇ℓₙ`.
pub fn sample_gradients(params: &MlpParams, batch: &[Example]) -> Result<Vec<(f64, Gradients)>> {
    batch
        .iter()
        .map(|&(x, y)| {
            let input = DVector::from_element(1, x);
            let (loss, g) = bce_loss(logit(params, x)?, y);
            Ok((loss, params.backward(&input, &DVector::from_element(1, g))?))
        })
        .collect()
}

/// Mean loss over `batch` and its gradient.
pub fn mean_loss_gradient(params: &MlpParams, batch: &[Example]) -> Result<(f64, Gradients)> {
    weighted_loss_gradient(params, batch, &vec![1.0 / batch.len() as f64; batch.len()])
}

/// `Σ εₙ ℓₙ` and its gradient.
pub fn weighted_loss_gradient(
    params: &MlpParams,
    batch: &[Example],
    eps: &[f64],
) -> Result<(f64, Gradients)> {
    if eps.len() != batch.len() {
        return Err(Error::Dimension {
            expected: batch.len(),
            got: eps.len(),
        });
    }
    let mut total = Gradients::zeros_like(params);
    let mut loss = 0.0;
    for ((l, g), &e) in sample_gradients(params, batch)?.iter().zip(eps) {
        loss += e * l;
        total.add_scaled(e, g);
    }
    Ok((loss, total))
}

/// One SGD step on `Σ εₙ ℓₙ`.
pub fn inner_step(params: &MlpParams, batch: &[Example], eps: &[f64], lr: f64) -> Result<MlpParams> {
    let (_, g) = weighted_loss_gradient(params, batch, eps)?;
    let mut out = params.clone();
    sgd_step(&mut out, &g, lr)?;
    Ok(out)
}

/// `uₙ = −∂L_val(Υ'(ε))/∂εₙ` at `ε = 0`, i.e. `lr · ⟨∇L_val, ∇ℓₙ⟩`.
pub fn meta_gradients(
    params: &MlpParams,
    train: &[Example],
    val: &[Example],
    lr: f64,
) -> Result<Vec<f64>> {
    let per_sample = sample_gradients(params, train)?;
    meta_from_sample_gradients(params, &per_sample, val, lr)
}

fn meta_from_sample_gradients(
    params: &MlpParams,
    per_sample: &[(f64, Gradients)],
    val: &[Example],
    lr: f64,
) -> Result<Vec<f64>> {
    if val.is_empty() {
        return Err(Error::Domain("validation batch is empty".into()));
    }
    let (_, g_val) = mean_loss_gradient(params, val)?;
    Ok(per_sample.iter().map(|(_, g)| lr * g_val.dot(g)).collect())
}

/// Clip at zero and normalize; uniform when nothing survives the clip.
pub fn normalize_weights(u: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = u.iter().map(|&v| v.max(0.0)).collect();
    let sum: f64 = clipped.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        clipped.iter().map(|v| v / sum).collect()
    } else {
        vec![1.0 / u.len() as f64; u.len()]
    }
}

pub fn accuracy(params: &MlpParams, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut hits = 0usize;
    for &(x, y) in examples {
        let predicted = f64::from(logit(params, x)? > 0.0);
        hits += usize::from(predicted == y);
    }
    Ok(hits as f64 / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct LrwOutcome {
    /// Final normalized weight per sample id (training split only).
    pub weights: BTreeMap<usize, f64>,
    /// Mean clipped meta-gradient per sample id.
    pub raw_weights: BTreeMap<usize, f64>,
    pub classifier: MlpParams,
    pub log: Vec<EpochLog>,
}

impl LrwOutcome {
    pub fn final_test_accuracy(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |l| l.test_accuracy)
    }

    /// Write the weights into the dataset's training samples.
    pub fn apply(&self, dataset: &mut WeightedDataset) {
        for s in &mut dataset.samples {
            if let Some(&w) = self.weights.get(&s.id) {
                s.weight = w;
                s.raw_weight = self.raw_weights[&s.id];
            }
        }
    }
}

/// Weight table row for export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub sample_id: usize,
    #[serde(rename = "Jx")]
    pub jx: f64,
    #[serde(rename = "Jy")]
    pub jy: f64,
    #[serde(rename = "Jz")]
    pub jz: f64,
    pub raw_weight: f64,
    pub normalized_weight: f64,
}

pub fn weight_table(dataset: &WeightedDataset) -> Vec<WeightRecord> {
    dataset
        .samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| WeightRecord {
            sample_id: s.id,
            jx: s.j.jx,
            jy: s.j.jy,
            jz: s.j.jz,
            raw_weight: s.raw_weight,
            normalized_weight: s.weight,
        })
        .collect()
}

struct Splits {
    train: Vec<(usize, Example)>,
    meta: Vec<Example>,
    test: Vec<Example>,
}

fn collect_splits(dataset: &WeightedDataset) -> Result<Splits> {
    let pick = |split: Split| {
        let mut v: Vec<(usize, Example)> = dataset
            .samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| (s.id, (s.z, f64::from(s.label))))
            .collect();
        v.sort_by_key(|(id, _)| *id);
        v
    };
    let train = pick(Split::Train);
    let meta: Vec<Example> = pick(Split::Meta).into_iter().map(|(_, e)| e).collect();
    let test = pick(Split::Test).into_iter().map(|(_, e)| e).collect();
    if train.is_empty() || meta.is_empty() {
        return Err(Error::Domain(
            "reweighting needs nonempty train and meta splits".into(),
        ));
    }
    Ok(Splits { train, meta, test })
}

fn draw_without_replacement<T: Copy>(pool: &[T], k: usize, rng: &mut RngStream) -> Vec<T> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    rng.shuffle(&mut idx);
    idx[..k.min(pool.len())].iter().map(|&i| pool[i]).collect()
}

/// Full reweighting loop. Results are keyed by sample id and do not depend on
/// the storage order of the dataset.
pub fn lrw_train(dataset: &WeightedDataset, cfg: &LrwConfig, rng: &mut RngStream) -> Result<LrwOutcome> {
    run(dataset, cfg, rng, true)
}

/// Same schedule with uniform weights and the baseline learning rate.
pub fn baseline_train(
    dataset: &WeightedDataset,
    cfg: &LrwConfig,
    rng: &mut RngStream,
) -> Result<LrwOutcome> {
    run(dataset, cfg, rng, false)
}

fn run(dataset: &WeightedDataset, cfg: &LrwConfig, rng: &mut RngStream, reweight: bool) -> Result<LrwOutcome> {
    cfg.validate()?;
    let splits = collect_splits(dataset)?;
    let mut init_rng = RngStream::new(rng.next_u64());
    let mut batch_rng = RngStream::new(rng.next_u64());
    let mut val_rng = RngStream::new(rng.next_u64());
    let mut params = cfg.classifier(&mut init_rng)?;

    let n = splits.train.len();
    let mut weight_sum = vec![0.0; n];
    let mut raw_sum = vec![0.0; n];
    let mut appearances = vec![0usize; n];
    let train_examples: Vec<Example> = splits.train.iter().map(|(_, e)| *e).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        batch_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| train_examples[i]).collect();
            let per_sample = sample_gradients(&params, &batch)?;
            let (w, lr) = if reweight {
                let val = draw_without_replacement(&splits.meta, cfg.batch_size, &mut val_rng);
                let u = meta_from_sample_gradients(&params, &per_sample, &val, cfg.meta_lr)?;
                for (&i, &ui) in chunk.iter().zip(&u) {
                    raw_sum[i] += ui.max(0.0);
                }
                (normalize_weights(&u), cfg.meta_lr)
            } else {
                (vec![1.0 / batch.len() as f64; batch.len()], cfg.baseline_lr)
            };
            let mut g = Gradients::zeros_like(&params);
            for ((_, gi), &wi) in per_sample.iter().zip(&w) {
                g.add_scaled(wi, gi);
            }
            sgd_step(&mut params, &g, lr)?;
            for (&i, &wi) in chunk.iter().zip(&w) {
                weight_sum[i] += wi;
                appearances[i] += 1;
            }
        }
        log.push(EpochLog {
            epoch,
            train_accuracy: accuracy(&params, &train_examples)?,
            test_accuracy: accuracy(&params, &splits.test)?,
        });
    }

    let mean: Vec<f64> = (0..n)
        .map(|i| {
            if appearances[i] == 0 {
                0.0
            } else {
                weight_sum[i] / appearances[i] as f64
            }
        })
        .collect();
    let total: f64 = mean.iter().sum();
    let weights = splits
        .train
        .iter()
        .zip(&mean)
        .map(|((id, _), &m)| (*id, if total > 0.0 { m / total } else { 1.0 / n as f64 }))
        .collect();
    let raw_weights = splits
        .train
        .iter()
        .enumerate()
        .map(|(i, (id, _))| {
            let raw = if appearances[i] == 0 {
                0.0
            } else {
                raw_sum[i] / appearances[i] as f64
            };
            (*id, raw)
        })
        .collect();
    Ok(LrwOutcome {
        weights,
        raw_weights,
        classifier: params,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::InertiaTriple;
    use crate::sensing::TrainingSample;

    fn tiny_net(seed: u64) -> MlpParams {
        MlpParams::new(&[1, 6, 4, 1], Activation::Relu, &mut RngStream::new(seed)).unwrap()
    }

    fn random_batch(n: usize, rng: &mut RngStream) -> Vec<Example> {
        (0..n)
            .map(|_| {
                let z = rng.normal();
                (z, f64::from(z > 0.0))
            })
            .collect()
    }

    fn max_abs_diff(a: &MlpParams, b: &MlpParams) -> f64 {
        a.to_flat()
            .iter()
            .zip(b.to_flat())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_perturbation_leaves_params_unchanged() {
        let net = tiny_net(1);
        let batch = random_batch(5, &mut RngStream::new(2));
        assert_eq!(inner_step(&net, &batch, &[0.0; 5], 0.1).unwrap(), net);
    }

    #[test]
    fn one_hot_perturbation_is_single_sample_step() {
        let net = tiny_net(3);
        let batch = random_batch(4, &mut RngStream::new(4));
        let stepped = inner_step(&net, &batch, &[0.0, 0.0, 1.0, 0.0], 0.1).unwrap();
        let direct = inner_step(&net, &batch[2..3], &[1.0], 0.1).unwrap();
        assert!(max_abs_diff(&stepped, &direct) < 1e-15);
    }

    #[test]
    fn uniform_perturbation_is_mean_loss_step() {
        let net = tiny_net(5);
        let batch = random_batch(8, &mut RngStream::new(6));
        let stepped = inner_step(&net, &batch, &[0.125; 8], 0.05).unwrap();
        let (_, g) = mean_loss_gradient(&net, &batch).unwrap();
        let mut direct = net.clone();
        sgd_step(&mut direct, &g, 0.05).unwrap();
        assert!(max_abs_diff(&stepped, &direct) < 1e-12);
    }

    fn mean_val_loss(net: &MlpParams, val: &[Example]) -> f64 {
        val.iter()
            .map(|&(x, y)| bce_loss(logit(net, x).unwrap(), y).0)
            .sum::<f64>()
            / val.len() as f64
    }

    #[test]
    fn meta_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(7);
        for trial in 0..5 {
            let net = tiny_net(100 + trial);
            let train = random_batch(6, &mut rng);
            let val = random_batch(5, &mut rng);
            let lr = 3e-4;
            let u = meta_gradients(&net, &train, &val, lr).unwrap();
            let h = 1e-4;
            for n in 0..train.len() {
                let mut eps = vec![0.0; train.len()];
                eps[n] = h;
                let plus = mean_val_loss(&inner_step(&net, &train, &eps, lr).unwrap(), &val);
                eps[n] = -h;
                let minus = mean_val_loss(&inner_step(&net, &train, &eps, lr).unwrap(), &val);
                let fd = -(plus - minus) / (2.0 * h);
                let rel = (fd - u[n]).abs() / u[n].abs().max(fd.abs()).max(1e-300);
                assert!(rel < 1e-3, "trial {trial} sample {n}: {} vs {fd}", u[n]);
            }
        }
    }

    #[test]
    fn fitted_validation_gives_zero_meta_gradient() {
        let net = MlpParams::zeros(&[1, 4, 1], Activation::Relu).unwrap();
        // Zero logits give σ = 1/2; pairing each input with both labels cancels the gradient.
        let val = vec![(0.3, 0.0), (0.3, 1.0)];
        let train = random_batch(3, &mut RngStream::new(8));
        assert_eq!(meta_gradients(&net, &train, &val, 0.1).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn duplicate_samples_get_equal_meta_gradients() {
        let net = tiny_net(9);
        let train = vec![(0.4, 1.0), (-1.0, 0.0), (0.4, 1.0)];
        let val = random_batch(4, &mut RngStream::new(10));
        let u = meta_gradients(&net, &train, &val, 3e-4).unwrap();
        assert_eq!(u[0], u[2]);
    }

    #[test]
    fn empty_validation_batch_is_rejected() {
        assert!(meta_gradients(&tiny_net(1), &[(0.0, 1.0)], &[], 0.1).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_weights(&[1.0, 3.0]), vec![0.25, 0.75]);
        assert_eq!(normalize_weights(&[-1.0, -2.0]), vec![0.5, 0.5]);
        assert_eq!(normalize_weights(&[0.0, 5.0, -5.0]), vec![0.0, 1.0, 0.0]);
    }

    fn synthetic_dataset(n: usize, seed: u64) -> WeightedDataset {
        let mut rng = RngStream::new(seed);
        let mut samples: Vec<TrainingSample> = (0..n)
            .map(|id| {
                let low = id % 2 == 0;
                let z = if low { -1.0 - rng.uniform() } else { 1.0 + rng.uniform() };
                TrainingSample {
                    id,
                    j: InertiaTriple::NOMINAL,
                    e: z + 3.0,
                    z,
                    label: u8::from(!low),
                    weight: 0.0,
                    raw_weight: 0.0,
                    split: Split::Train,
                }
            })
            .collect();
        let mut lowest: Vec<usize> = (0..n).collect();
        lowest.sort_by(|&a, &b| samples[a].z.total_cmp(&samples[b].z));
        for &i in &lowest[..n / 10] {
            samples[i].split = Split::Meta;
        }
        WeightedDataset {
            seed,
            sigma: 0.0,
            m: 0,
            n,
            samples,
            provenance: None,
        }
    }

    fn group_means(ds: &WeightedDataset, out: &LrwOutcome) -> (f64, f64) {
        let mut acc = [(0.0, 0usize); 2];
        for s in ds.samples.iter().filter(|s| s.split == Split::Train) {
            let slot = &mut acc[s.label as usize];
            slot.0 += out.weights[&s.id];
            slot.1 += 1;
        }
        (acc[0].0 / acc[0].1 as f64, acc[1].0 / acc[1].1 as f64)
    }

    #[test]
    fn separated_groups_are_ordered() {
        let ds = synthetic_dataset(200, 11);
        let cfg = LrwConfig {
            epochs: 20,
            ..LrwConfig::default()
        };
        let out = lrw_train(&ds, &cfg, &mut RngStream::new(12)).unwrap();
        let (low, high) = group_means(&ds, &out);
        assert!(low > high, "{low} vs {high}");
        let total: f64 = out.weights.values().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(out.weights.values().all(|&w| w >= 0.0));
    }

    #[test]
    fn single_training_sample_gets_unit_weight() {
        let mut ds = synthetic_dataset(10, 13);
        for s in &mut ds.samples {
            if s.split == Split::Train && s.id != 9 {
                s.split = Split::Test;
            }
        }
        let cfg = LrwConfig {
            epochs: 3,
            ..LrwConfig::default()
        };
        let out = lrw_train(&ds, &cfg, &mut RngStream::new(1)).unwrap();
        assert_eq!(out.weights.len(), 1);
        assert_eq!(out.weights[&9], 1.0);
    }

    #[test]
    fn reproducible_and_order_invariant() {
        let ds = synthetic_dataset(80, 14);
        let cfg = LrwConfig {
            epochs: 5,
            ..LrwConfig::default()
        };
        let a = lrw_train(&ds, &cfg, &mut RngStream::new(15)).unwrap();
        let b = lrw_train(&ds, &cfg, &mut RngStream::new(15)).unwrap();
        assert_eq!(a.weights, b.weights);

        let mut shuffled = ds.clone();
        shuffled.samples.reverse();
        let c = lrw_train(&shuffled, &cfg, &mut RngStream::new(15)).unwrap();
        assert_eq!(a.weights, c.weights);
        assert_eq!(a.raw_weights, c.raw_weights);
    }

    #[test]
    fn missing_meta_split_is_rejected() {
        let mut ds = synthetic_dataset(20, 16);
        for s in &mut ds.samples {
            s.split = Split::Train;
        }
        assert!(lrw_train(&ds, &LrwConfig::default(), &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn outcome_applies_and_exports() {
        let mut ds = synthetic_dataset(40, 17);
        let cfg = LrwConfig {
            epochs: 2,
            ..LrwConfig::default()
        };
        let out = lrw_train(&ds, &cfg, &mut RngStream::new(2)).unwrap();
        out.apply(&mut ds);
        let table = weight_table(&ds);
        assert_eq!(table.len(), out.weights.len());
        let total: f64 = table.iter().map(|r| r.normalized_weight).sum();
        assert!((total - 1.0).abs() < 1e-9);
        let text = serde_json::to_string(&table).unwrap();
        assert!(text.contains("\"sample_id\"") && text.contains("\"normalized_weight\""));
    }
}
