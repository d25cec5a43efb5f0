//! Aggregation of final-time relative errors into the filter × regime table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use boosted_ukf::boosted::{FilterKind, RunSummary};
use boosted_ukf::dynamics::Regime;
use boosted_ukf::provenance::Provenance;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

const AXES: [&str; 3] = ["Jx", "Jy", "Jz"];

fn regime_rank(r: Regime) -> usize {
    match r {
        Regime::Full => 0,
        Regime::Windowed => 1,
        Regime::Persistent => 2,
        Regime::Zero => 3,
    }
}

/// Statistics of the signed relative errors (%) of one filter in one regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub filter: FilterKind,
    pub regime: Regime,
    pub n: usize,
    /// Mean of `(estimate / truth − 1)·100` over realizations.
    pub mean: [f64; 3],
    /// Sample standard deviation (`n − 1`); zero for a single realization.
    pub std: [f64; 3],
    pub mean_abs: [f64; 3],
}

impl Cell {
    fn from_errors(filter: FilterKind, regime: Regime, errors: &[[f64; 3]]) -> Self {
        let n = errors.len();
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        let mut mean_abs = [0.0; 3];
        for a in 0..3 {
            let m = errors.iter().map(|e| e[a]).sum::<f64>() / n as f64;
            mean[a] = m;
            mean_abs[a] = errors.iter().map(|e| e[a].abs()).sum::<f64>() / n as f64;
            if n > 1 {
                let ss = errors.iter().map(|e| (e[a] - m).powi(2)).sum::<f64>();
                std[a] = (ss / (n - 1) as f64).sqrt();
            }
        }
        Self {
            filter,
            regime,
            n,
            mean,
            std,
            mean_abs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    /// Ordered by filter (EKF, UKF, EnKF, Boosted UKF), then regime.
    pub cells: Vec<Cell>,
}

impl ResultTable {
    pub fn from_runs(runs: &[RunSummary]) -> Self {
        let mut groups: BTreeMap<(FilterKind, usize), (Regime, Vec<[f64; 3]>)> = BTreeMap::new();
        for r in runs {
            groups
                .entry((r.filter, regime_rank(r.regime)))
                .or_insert_with(|| (r.regime, Vec::new()))
                .1
                .push(r.rel_err_pct);
        }
        let cells = groups
            .into_iter()
            .map(|((filter, _), (regime, errs))| Cell::from_errors(filter, regime, &errs))
            .collect();
        Self { cells }
    }

    pub fn get(&self, filter: FilterKind, regime: Regime) -> Option<&Cell> {
        self.cells.iter().find(|c| c.filter == filter && c.regime == regime)
    }

    pub fn filters(&self) -> Vec<FilterKind> {
        let mut f: Vec<_> = self.cells.iter().map(|c| c.filter).collect();
        f.dedup();
        f
    }

    pub fn regimes(&self) -> Vec<Regime> {
        let mut r: Vec<_> = self.cells.iter().map(|c| c.regime).collect();
        r.sort_by_key(|&x| regime_rank(x));
        r.dedup();
        r
    }

    /// Aligned text: one row block per filter, one column per regime,
    /// three lines `Jx/Jy/Jz: mean ± std` per cell.
    pub fn render_text(&self) -> String {
        let regimes = self.regimes();
        let label_w = self
            .filters()
            .iter()
            .map(|f| f.label().len())
            .max()
            .unwrap_or(6)
            .max("Method".len());
        let entry = |c: Option<&Cell>, a: usize| match c {
            Some(c) => format!("{}: {:.4} ± {:.4}", AXES[a], c.mean[a], c.std[a]),
            None => "-".to_string(),
        };
        let mut col_w = vec![0usize; regimes.len()];
        for (k, r) in regimes.iter().enumerate() {
            col_w[k] = capitalized(*r).chars().count();
            for f in self.filters() {
                for a in 0..3 {
                    col_w[k] = col_w[k].max(entry(self.get(f, *r), a).chars().count());
                }
            }
        }
        let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w.saturating_sub(s.chars().count())));
        let rule = {
            let mut s = format!("+{}", "-".repeat(label_w + 2));
            for w in &col_w {
                s.push('+');
                s.push_str(&"-".repeat(w + 2));
            }
            s.push('+');
            s
        };
        let mut out = String::new();
        writeln!(out, "{rule}").unwrap();
        let mut header = format!("| {} ", pad("Method", label_w));
        for (r, w) in regimes.iter().zip(&col_w) {
            header.push_str(&format!("| {} ", pad(&capitalized(*r), *w)));
        }
        writeln!(out, "{header}|").unwrap();
        writeln!(out, "{rule}").unwrap();
        for f in self.filters() {
            for a in 0..3 {
                let name = if a == 0 { f.label() } else { "" };
                let mut line = format!("| {} ", pad(name, label_w));
                for (r, w) in regimes.iter().zip(&col_w) {
                    line.push_str(&format!("| {} ", pad(&entry(self.get(f, *r), a), *w)));
                }
                writeln!(out, "{line}|").unwrap();
            }
            writeln!(out, "{rule}").unwrap();
        }
        out
    }

    /// Long-format CSV: `filter,regime,axis,n,mean,std,mean_abs`.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("filter,regime,axis,n,mean,std,mean_abs\n");
        for c in &self.cells {
            for a in 0..3 {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    c.filter, c.regime, AXES[a], c.n, c.mean[a], c.std[a], c.mean_abs[a]
                )
                .unwrap();
            }
        }
        out
    }
}

fn capitalized(r: Regime) -> String {
    let name = r.name();
    let mut chars = name.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// One realization's initial prior mean, for reproducing Monte Carlo runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    pub index: usize,
    pub seed: u64,
    pub prior_mean: [f64; 3],
}

/// Output of `run`: every final-time summary plus the aggregated table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub provenance: Provenance,
    pub config: ExperimentConfig,
    pub realizations: Vec<Realization>,
    pub runs: Vec<RunSummary>,
    pub table: ResultTable,
}
