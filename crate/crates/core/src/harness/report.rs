//! CSV reports.
//!
//! Four schemas, all with a header row:
//!
//! * coverage reports: one row per (mode, eps_bias) with the fields of
//!   [`CoverageReport`];
//! * plot-ready long format: `mode,eps_bias,coverage,mean_cv,prop_unbounded`;
//! * calibration sets: `score,weight`;
//! * per-prefix outcomes: the fields of [`PrefixOutcome`].
//!
//! Infinite critical values are written as `inf`.

use std::fs::{self, File};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::Mode;
use crate::conformal::{CalibrationRecord, CriticalValue, WeightedCalibrationSet};
use crate::error::{Error, Result};

/// Result of evaluating one test prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixOutcome {
    pub prefix: usize,
    /// `inf` for an unbounded region.
    pub critical_value: f64,
    /// Reweighting DR used for the region (1 for unweighted modes).
    pub w_tilde: f64,
    /// Search candidates that passed their own test; empty for unweighted modes.
    pub n_passing: Option<usize>,
    pub covered: usize,
    pub n_continuations: usize,
    pub containment_violations: usize,
}

impl PrefixOutcome {
    pub fn critical_value(&self) -> CriticalValue {
        if self.critical_value.is_finite() {
            CriticalValue::Finite(self.critical_value)
        } else {
            CriticalValue::Infinite
        }
    }
}

pub(crate) fn cv_to_f64(cv: CriticalValue) -> f64 {
    cv.finite().unwrap_or(f64::INFINITY)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub mode: Mode,
    pub eps_bias: f64,
    /// Fraction of (test prefix, target continuation) pairs inside the region.
    pub marginal_coverage: f64,
    /// Mean over prefixes with a finite critical value; NaN if there are none.
    pub mean_finite_critical_value: f64,
    pub proportion_unbounded: f64,
    pub n_test: usize,
    pub n_pairs: usize,
    /// Prefixes whose max-DR search found no passing candidate.
    pub n_no_pass: usize,
    pub containment_violations: usize,
}

impl CoverageReport {
    pub fn from_outcomes(mode: Mode, eps_bias: f64, outcomes: &[PrefixOutcome]) -> Self {
        let n_test = outcomes.len();
        let n_pairs: usize = outcomes.iter().map(|o| o.n_continuations).sum();
        let covered: usize = outcomes.iter().map(|o| o.covered).sum();
        let finite: Vec<f64> = outcomes
            .iter()
            .map(|o| o.critical_value)
            .filter(|c| c.is_finite())
            .collect();
        let mean_finite_critical_value = if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        CoverageReport {
            mode,
            eps_bias,
            marginal_coverage: if n_pairs == 0 {
                f64::NAN
            } else {
                covered as f64 / n_pairs as f64
            },
            mean_finite_critical_value,
            proportion_unbounded: if n_test == 0 {
                f64::NAN
            } else {
                (n_test - finite.len()) as f64 / n_test as f64
            },
            n_test,
            n_pairs,
            n_no_pass: outcomes.iter().filter(|o| o.n_passing == Some(0)).count(),
            containment_violations: outcomes.iter().map(|o| o.containment_violations).sum(),
        }
    }
}

/// Row of the plot-ready long-format CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub mode: Mode,
    pub eps_bias: f64,
    pub coverage: f64,
    pub mean_cv: f64,
    pub prop_unbounded: f64,
}

impl From<&CoverageReport> for PlotRow {
    fn from(r: &CoverageReport) -> Self {
        PlotRow {
            mode: r.mode,
            eps_bias: r.eps_bias,
            coverage: r.marginal_coverage,
            mean_cv: r.mean_finite_critical_value,
            prop_unbounded: r.proportion_unbounded,
        }
    }
}

/// Plot rows sorted by mode, then eps_bias.
pub fn plot_rows(reports: &[CoverageReport]) -> Vec<PlotRow> {
    let mut rows: Vec<PlotRow> = reports.iter().map(PlotRow::from).collect();
    rows.sort_by(|a, b| a.mode.cmp(&b.mode).then(a.eps_bias.total_cmp(&b.eps_bias)));
    rows
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::parse(path, format!("row {}: {e}", i + 1))))
        .collect()
}

pub fn write_calibration(path: &Path, calib: &WeightedCalibrationSet) -> Result<()> {
    write_csv(path, calib.records())
}

pub fn read_calibration(path: &Path) -> Result<WeightedCalibrationSet> {
    let records: Vec<CalibrationRecord> = read_csv(path)?;
    WeightedCalibrationSet::new(records).map_err(|e| Error::parse(path, e))
}
