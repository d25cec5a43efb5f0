use std::path::{Path, PathBuf};

use boosted_ukf::boosted::{BoostedConfig, FilterKind};
use boosted_ukf::dynamics::Regime;
use boosted_ukf::filters::EnkfConfig;
use boosted_ukf::lrw::LrwConfig;
use boosted_ukf::wfm::FlowTrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable consulted when neither the command line nor the config sets a seed.
pub const SEED_ENV: &str = "BOOSTED_UKF_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub n: usize,
    /// Gyro noise of the synthetic measured trajectory (rad/s).
    pub sigma: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { n: 2000, sigma: 1e-3 }
    }
}

/// Everything an experiment needs. Every field has a default, so a config
/// file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub regimes: Vec<Regime>,
    pub filters: Vec<FilterKind>,
    /// Noise seeds of fixed-initial-condition runs (used when `monte_carlo` is 0).
    pub seeds: Vec<u64>,
    /// Number of random-initial-condition realizations.
    pub monte_carlo: usize,
    pub mc_prior_mean: [f64; 3],
    pub mc_prior_std: [f64; 3],
    pub horizon: f64,
    pub dt: f64,
    /// Flow samples drawn for the Gaussian summary.
    pub summary_samples: usize,
    /// Keep every k-th row of the written traces.
    pub trace_stride: usize,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub lrw: LrwConfig,
    pub wfm: FlowTrainConfig,
    pub filter: BoostedConfig,
    pub enkf: EnkfConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            regimes: vec![Regime::Full, Regime::Windowed, Regime::Persistent],
            filters: FilterKind::ALL.to_vec(),
            seeds: vec![0],
            monte_carlo: 50,
            mc_prior_mean: [140.0, 20.0, 36.0],
            mc_prior_std: [10.0, 10.0, 10.0],
            horizon: 400.0,
            dt: 0.01,
            summary_samples: 2000,
            trace_stride: 10,
            output_dir: PathBuf::from("out"),
            dataset: DatasetSection::default(),
            lrw: LrwConfig::default(),
            wfm: FlowTrainConfig::default(),
            filter: BoostedConfig::default(),
            enkf: EnkfConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Shrink to CI size: 100 s horizon, 5 realizations, 2000 flow epochs, 500 dataset samples.
    pub fn ci_scale(mut self) -> Self {
        self.horizon = 100.0;
        self.monte_carlo = 5;
        self.wfm.epochs = 2000;
        self.dataset.n = 500;
        self
    }

    /// Filter settings with the experiment's horizon and step.
    pub fn filter_config(&self) -> BoostedConfig {
        BoostedConfig {
            horizon: self.horizon,
            dt: self.dt,
            ..self.filter.clone()
        }
    }

    /// Seed precedence: explicit flag, config file, environment, then 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CliError::Usage(msg.to_string()));
        if !(self.horizon > 0.0 && self.dt > 0.0 && self.dt <= self.horizon) {
            return bad("horizon and dt must be positive with dt <= horizon");
        }
        if self.regimes.is_empty() || self.filters.is_empty() {
            return bad("at least one regime and one filter are required");
        }
        if self.monte_carlo == 0 && self.seeds.is_empty() {
            return bad("either monte_carlo > 0 or a nonempty seed list is required");
        }
        if self.mc_prior_std.iter().any(|s| !(*s >= 0.0)) {
            return bad("Monte Carlo prior std must be nonnegative");
        }
        if self.summary_samples < 2 {
            return bad("summary_samples must be at least 2");
        }
        if self.trace_stride == 0 {
            return bad("trace_stride must be positive");
        }
        Ok(())
    }
}
