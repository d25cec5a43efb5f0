//! The four subcommands, callable without going through argument parsing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use boosted_ukf::boosted::{Schedule, VirtualSensor};
use boosted_ukf::filters::write_trace_csv;
use boosted_ukf::provenance::Provenance;
use boosted_ukf::sensing::WeightedDataset;
use boosted_ukf::wfm::WfmSummary;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::experiment::run_experiment;
use crate::pipeline::{generate_dataset, prior_from_scratch, train_prior};
use crate::results::{ResultFile, ResultTable};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::json(path, e))?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::json(path, e))
}

/// Generate a reliability-scored dataset and write it as JSON.
pub fn cmd_datagen(sigma: f64, n: usize, seed: u64, out: &Path) -> Result<WeightedDataset> {
    let ds = generate_dataset(n, sigma, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ds.save(out)?;
    Ok(ds)
}

/// Paths written by [`cmd_train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutputs {
    pub weights: PathBuf,
    pub flow: PathBuf,
    pub summary: PathBuf,
    pub summary_value: WfmSummary,
}

/// Reweight a dataset, fit the flow and export `weights.json`, `flow.json` and `wfm_summary.json`.
pub fn cmd_train(cfg: &ExperimentConfig, seed: u64, dataset: &Path, out_dir: &Path) -> Result<TrainOutputs> {
    let ds: WeightedDataset = read_json(dataset)?;
    let prior = train_prior(&ds, cfg, seed)?;
    let provenance = Provenance::new(seed, cfg);
    create_dir(out_dir)?;
    let out = TrainOutputs {
        weights: out_dir.join("weights.json"),
        flow: out_dir.join("flow.json"),
        summary: out_dir.join("wfm_summary.json"),
        summary_value: prior.summary.clone(),
    };
    write_json(&out.weights, &prior.weights_file(&provenance))?;
    write_json(&out.flow, &prior.flow_file(&provenance))?;
    write_json(&out.summary, &prior.summary)?;
    Ok(out)
}

/// Run the configured filters and write traces, per-run summaries and `results.json`.
///
/// Without `summary`, a boosted run trains its own prior from the config's dataset settings.
/// Traces and per-run summaries are written for fixed-prior runs only.
pub fn cmd_run(cfg: &ExperimentConfig, seed: u64, summary: Option<&Path>, out_dir: &Path) -> Result<ResultFile> {
    cfg.validate()?;
    create_dir(out_dir)?;
    let provenance = Provenance::new(seed, cfg);
    let needs_vs = cfg.filters.contains(&boosted_ukf::boosted::FilterKind::Boosted);
    let vs = if !needs_vs {
        None
    } else {
        let s = match summary {
            Some(path) => read_json::<WfmSummary>(path)?,
            None => {
                let prior = prior_from_scratch(cfg, seed)?;
                write_json(&out_dir.join("wfm_summary.json"), &prior.summary)?;
                prior.summary
            }
        };
        Some(VirtualSensor::from_summary(&s.belief()?, cfg.filter.schedule)?)
    };
    let write_traces = cfg.monte_carlo == 0;
    let stride = cfg.trace_stride;
    let (realizations, runs) = run_experiment(cfg, seed, vs.as_ref(), |real, kind, scenario, trace| {
        if !write_traces {
            return Ok(());
        }
        let stem = format!("{}_{}_{}", kind, scenario.regime, real.index);
        let path = out_dir.join(format!("trace_{stem}.csv"));
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let rows: Vec<_> = trace
            .rows
            .iter()
            .enumerate()
            .filter(|(i, _)| i % stride == 0 || *i == trace.rows.len() - 1)
            .map(|(_, r)| r.clone())
            .collect();
        let preamble = [
            provenance.preamble(),
            format!("filter={kind} regime={} run_seed={}", scenario.regime, real.seed),
        ];
        let mut w = BufWriter::new(file);
        write_trace_csv(&mut w, &rows, &preamble)?;
        w.flush().map_err(|e| CliError::io(&path, e))?;
        let summary = boosted_ukf::boosted::RunSummary::new(kind, scenario, real.seed, trace);
        write_json(&out_dir.join(format!("summary_{stem}.json")), &RunSummaryFile { provenance: &provenance, summary: &summary })
    })?;
    let result = ResultFile {
        provenance,
        config: cfg.clone(),
        realizations,
        table: ResultTable::from_runs(&runs),
        runs,
    };
    write_json(&out_dir.join("results.json"), &result)?;
    Ok(result)
}

#[derive(Serialize)]
struct RunSummaryFile<'a> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    summary: &'a boosted_ukf::boosted::RunSummary,
}

/// Output format of [`cmd_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

/// Merge result files into one table and render it.
pub fn cmd_report(files: &[PathBuf], format: ReportFormat) -> Result<(ResultTable, String)> {
    if files.is_empty() {
        return Err(CliError::Usage("report needs at least one result file".into()));
    }
    let mut runs = Vec::new();
    let mut sources = Vec::new();
    for f in files {
        let r: ResultFile = read_json(f)?;
        sources.push(format!("{} ({})", f.display(), r.provenance.preamble()));
        runs.extend(r.runs);
    }
    let table = ResultTable::from_runs(&runs);
    let mut out = String::new();
    let comment = if format == ReportFormat::Csv { "# " } else { "" };
    out.push_str(&format!(
        "{comment}relative error (%) at final time, mean ± std; version={}\n",
        env!("CARGO_PKG_VERSION")
    ));
    for s in &sources {
        out.push_str(&format!("{comment}source: {s}\n"));
    }
    out.push_str(&match format {
        ReportFormat::Text => table.render_text(),
        ReportFormat::Csv => table.render_csv(),
    });
    Ok((table, out))
}

/// Virtual sensor built from a summary file with the default schedule.
pub fn load_virtual_sensor(path: &Path, schedule: Schedule) -> Result<VirtualSensor> {
    let s: WfmSummary = read_json(path)?;
    Ok(VirtualSensor::from_summary(&s.belief()?, schedule)?)
}
