//! Offline preprocessing: dataset, reliability weights, flow and its Gaussian summary.

use boosted_ukf::lrw::{lrw_train, weight_table, EpochLog, LrwOutcome, WeightRecord};
use boosted_ukf::numerics::{derive_seed, RngStream};
use boosted_ukf::provenance::Provenance;
use boosted_ukf::sensing::{build_dataset, DatasetConfig, WeightedDataset};
use boosted_ukf::wfm::{gaussian_summary, wfm_sample, wfm_train, FlowCheckpoint, FlowField, WfmSummary};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

const DATASET_STREAM: u64 = 1;
const LRW_STREAM: u64 = 2;
const FLOW_STREAM: u64 = 3;
const SAMPLE_STREAM: u64 = 4;

pub fn generate_dataset(n: usize, sigma: f64, seed: u64) -> Result<WeightedDataset> {
    if n == 0 {
        return Err(CliError::Usage("dataset size must be positive".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(CliError::Usage(format!("noise level {sigma} must be nonnegative")));
    }
    let cfg = DatasetConfig::new(n, sigma);
    let mut rng = RngStream::new(derive_seed(seed, DATASET_STREAM));
    let mut ds = build_dataset(&cfg, &mut rng)?;
    ds.seed = seed;
    ds.provenance = Some(Provenance::new(seed, &cfg));
    Ok(ds)
}

/// Reliability weights as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub provenance: Provenance,
    pub weights: Vec<WeightRecord>,
    pub log: Vec<EpochLog>,
}

/// Flow checkpoint as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowFile {
    pub provenance: Provenance,
    pub flow: FlowCheckpoint,
}

pub struct TrainedPrior {
    pub dataset: WeightedDataset,
    pub lrw: LrwOutcome,
    pub field: FlowField,
    pub losses: Vec<f64>,
    pub summary: WfmSummary,
}

impl TrainedPrior {
    pub fn weights_file(&self, provenance: &Provenance) -> WeightsFile {
        WeightsFile {
            provenance: provenance.clone(),
            weights: weight_table(&self.dataset),
            log: self.lrw.log.clone(),
        }
    }

    pub fn flow_file(&self, provenance: &Provenance) -> FlowFile {
        FlowFile {
            provenance: provenance.clone(),
            flow: self.field.to_checkpoint(),
        }
    }
}

/// Reweight the training split, fit the flow to it and summarize flow samples.
pub fn train_prior(dataset: &WeightedDataset, cfg: &ExperimentConfig, seed: u64) -> Result<TrainedPrior> {
    let mut dataset = dataset.clone();
    let lrw = lrw_train(&dataset, &cfg.lrw, &mut RngStream::new(derive_seed(seed, LRW_STREAM)))?;
    lrw.apply(&mut dataset);
    let (field, losses) = wfm_train(&dataset, &cfg.wfm, &mut RngStream::new(derive_seed(seed, FLOW_STREAM)))?;
    let samples = wfm_sample(
        &field,
        cfg.summary_samples,
        cfg.wfm.ode_steps,
        &mut RngStream::new(derive_seed(seed, SAMPLE_STREAM)),
    )?;
    let belief = gaussian_summary(&samples)?;
    let mut summary = WfmSummary::new(&belief, cfg.summary_samples, seed);
    summary.provenance = Some(Provenance::new(seed, cfg));
    Ok(TrainedPrior {
        dataset,
        lrw,
        field,
        losses,
        summary,
    })
}

/// Dataset generation followed by [`train_prior`], as `run` does when no summary is supplied.
pub fn prior_from_scratch(cfg: &ExperimentConfig, seed: u64) -> Result<TrainedPrior> {
    let ds = generate_dataset(cfg.dataset.n, cfg.dataset.sigma, seed)?;
    train_prior(&ds, cfg, seed)
}
