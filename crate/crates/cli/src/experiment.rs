use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use boosted_ukf::boosted::{run_filter, BoostedConfig, FilterKind, RunSummary, RunTrace, Scenario, VirtualSensor};
use boosted_ukf::dynamics::{InertiaTriple, Regime};
use boosted_ukf::numerics::{derive_seed, RngStream};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::results::Realization;

const REALIZATION_BASE: u64 = 100;
const PRIOR_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const ENKF_STREAM: u64 = 20;
const MAX_REJECTIONS: usize = 1000;

/// Draw a prior mean from independent normals, redrawing each component until it is positive.
pub fn draw_prior_mean(mean: &[f64; 3], std: &[f64; 3], rng: &mut RngStream) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for a in 0..3 {
        let mut tries = 0;
        loop {
            let v = mean[a] + std[a] * rng.normal();
            if v > 0.0 {
                out[a] = v;
                break;
            }
            tries += 1;
            if tries >= MAX_REJECTIONS {
                return Err(boosted_ukf::Error::ResampleLimit(tries).into());
            }
        }
    }
    Ok(out)
}

/// Monte Carlo realizations with random prior means, or fixed-prior runs over the configured seeds.
pub fn realizations(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Realization>> {
    if cfg.monte_carlo > 0 {
        (0..cfg.monte_carlo)
            .map(|k| {
                let s = derive_seed(seed, REALIZATION_BASE + k as u64);
                let mut rng = RngStream::new(derive_seed(s, PRIOR_STREAM));
                Ok(Realization {
                    index: k,
                    seed: s,
                    prior_mean: draw_prior_mean(&cfg.mc_prior_mean, &cfg.mc_prior_std, &mut rng)?,
                })
            })
            .collect()
    } else {
        Ok(cfg
            .seeds
            .iter()
            .enumerate()
            .map(|(k, &s)| Realization {
                index: k,
                seed: derive_seed(seed, s),
                prior_mean: cfg.filter.prior_mean,
            })
            .collect())
    }
}

fn regime_stream(r: Regime) -> u64 {
    match r {
        Regime::Zero => 0,
        Regime::Full => 1,
        Regime::Windowed => 2,
        Regime::Persistent => 3,
    }
}

/// Measurements of the true body for one realization and regime.
pub fn scenario_for(cfg: &ExperimentConfig, realization: &Realization, regime: Regime) -> Result<Scenario> {
    let mut rng = RngStream::new(derive_seed(realization.seed, NOISE_STREAM + 10 * regime_stream(regime)));
    Ok(Scenario::simulate(&cfg.filter_config(), InertiaTriple::NOMINAL, regime, &mut rng)?)
}

/// Run every configured filter on every realization and regime.
///
/// Jobs (one per realization and regime) are spread over the available cores; each
/// run draws from its own derived seed, so the output does not depend on the thread
/// count. `sink` sees each trace as it completes. Boosted runs require `vs`.
pub fn run_experiment<F>(
    cfg: &ExperimentConfig,
    seed: u64,
    vs: Option<&VirtualSensor>,
    sink: F,
) -> Result<(Vec<Realization>, Vec<RunSummary>)>
where
    F: Fn(&Realization, FilterKind, &Scenario, &RunTrace) -> Result<()> + Sync,
{
    cfg.validate()?;
    if cfg.filters.contains(&FilterKind::Boosted) && vs.is_none() {
        return Err(CliError::Usage("the boosted filter needs a flow summary".into()));
    }
    let reals = realizations(cfg, seed)?;
    let jobs: Vec<(&Realization, Regime)> = reals
        .iter()
        .flat_map(|r| cfg.regimes.iter().map(move |&g| (r, g)))
        .collect();
    let run_job = |(real, regime): (&Realization, Regime)| -> Result<Vec<RunSummary>> {
        let filter_cfg = BoostedConfig {
            prior_mean: real.prior_mean,
            ..cfg.filter_config()
        };
        let scenario = scenario_for(cfg, real, regime)?;
        let mut out = Vec::with_capacity(cfg.filters.len());
        for &kind in &cfg.filters {
            let mut rng = RngStream::new(derive_seed(real.seed, ENKF_STREAM + regime_stream(regime)));
            let trace = run_filter(kind, &filter_cfg, &cfg.enkf, &scenario, vs, &mut rng)?;
            sink(real, kind, &scenario, &trace)?;
            out.push(RunSummary::new(kind, &scenario, real.seed, &trace));
        }
        Ok(out)
    };
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len());
    let results: Vec<Result<Vec<RunSummary>>> = if workers <= 1 {
        jobs.iter().map(|&j| run_job(j)).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<Vec<RunSummary>>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    let r = run_job(jobs[i]);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every job runs"))
            .collect()
    };
    let mut runs = Vec::with_capacity(jobs.len() * cfg.filters.len());
    for r in results {
        runs.extend(r?);
    }
    Ok((reals, runs))
}
