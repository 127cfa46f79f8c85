//! Aggregation of run artifacts into a per-domain x method table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::{summarize, two_decimals};
use super::experiment::RunArtifact;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub holdout: String,
    pub shots: Option<usize>,
    pub seed: u64,
    pub accuracy: f64,
    pub domain_probe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub shots: Option<usize>,
    pub holdouts: Vec<String>,
    /// Per-holdout accuracy in percent, averaged over seeds.
    pub accuracy_percent: Vec<f64>,
    pub domain_probe_percent: Vec<f64>,
    pub average_percent: f64,
    /// `average_percent` cut to two decimals, for display only.
    pub average_display: String,
    pub domain_probe_average_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub methods: Vec<MethodSummary>,
}

pub fn build_report(artifacts: &[RunArtifact]) -> Result<Report> {
    if artifacts.is_empty() {
        return Err(Error::invalid("report needs at least one run artifact"));
    }
    let rows: Vec<ReportRow> = artifacts
        .iter()
        .map(|a| ReportRow {
            method: a.method.clone(),
            holdout: a.holdout().to_string(),
            shots: a.shots,
            seed: a.run.config.seed,
            accuracy: a.eval.accuracy.value,
            domain_probe: a.domain_probe.value,
        })
        .collect();

    type Cells = BTreeMap<String, (Vec<f64>, Vec<f64>)>;
    let mut groups: BTreeMap<(String, Option<usize>), Cells> = BTreeMap::new();
    for r in &rows {
        let cell = groups
            .entry((r.method.clone(), r.shots))
            .or_default()
            .entry(r.holdout.clone())
            .or_default();
        cell.0.push(100.0 * r.accuracy);
        cell.1.push(100.0 * r.domain_probe);
    }

    let mut methods = Vec::with_capacity(groups.len());
    for ((method, shots), cells) in groups {
        let mut holdouts = Vec::new();
        let mut accuracy_percent = Vec::new();
        let mut domain_probe_percent = Vec::new();
        for (holdout, (acc, probe)) in cells {
            holdouts.push(holdout);
            accuracy_percent.push(summarize(&acc)?);
            domain_probe_percent.push(summarize(&probe)?);
        }
        let average_percent = summarize(&accuracy_percent)?;
        methods.push(MethodSummary {
            method,
            shots,
            holdouts,
            average_display: two_decimals(average_percent),
            average_percent,
            domain_probe_average_percent: summarize(&domain_probe_percent)?,
            accuracy_percent,
            domain_probe_percent,
        });
    }
    Ok(Report { rows, methods })
}

impl Report {
    /// Plain-text table, one line per (method, shots).
    pub fn render(&self) -> String {
        let mut out = String::new();
        for m in &self.methods {
            let shots = m.shots.map_or("all".to_string(), |n| n.to_string());
            let _ = write!(out, "{:<24} shots={:<4}", m.method, shots);
            for (h, (a, p)) in m.holdouts.iter().zip(m.accuracy_percent.iter().zip(&m.domain_probe_percent)) {
                let _ = write!(out, " {h}: {a:.2} (probe {p:.2})");
            }
            let _ = writeln!(
                out,
                " | avg {} (probe {:.2})",
                m.average_display, m.domain_probe_average_percent
            );
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(["method", "holdout", "accuracy", "domain_probe"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.method.as_str(),
                r.holdout.as_str(),
                &r.accuracy.to_string(),
                &r.domain_probe.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn write_csv(report: &Report, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_csv()?).map_err(|e| Error::io(path, e))
}
