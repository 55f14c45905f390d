//! CSV/JSON reports and the cross-dataset correlation scatter.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::record::{EvalRecord, EvalResult};
use crate::metrics::pearson;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::Config(format!("report format must be csv or json, got {other:?}"))),
        }
    }
}

/// One CSV line. Clean rows have severity 0 and kind `none`; attack rows
/// have kind `none` and no severity; corruption records give one row per
/// kind plus a `mean` row holding mC-EPE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub dataset: String,
    pub threat: String,
    pub corruption_kind: String,
    pub severity: Option<u8>,
    pub mean_epe: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub version: String,
}

/// Rows for all records, stably sorted by (model, corruption_kind, severity).
pub fn report_rows(records: &[EvalRecord]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for r in records {
        let base = |kind: &str, severity: Option<u8>, mean_epe: f64, n_samples: usize| ReportRow {
            model: r.input.model.clone(),
            dataset: r.input.dataset.clone(),
            threat: r.input.threat.label(),
            corruption_kind: kind.to_string(),
            severity,
            mean_epe,
            n_samples,
            seed: r.input.seed,
            version: r.input.version.clone(),
        };
        match &r.result {
            EvalResult::Clean { summary } => rows.push(base("none", Some(0), summary.mean_epe, summary.n_samples)),
            EvalResult::Attack { adversarial, .. } => {
                rows.push(base("none", None, adversarial.mean_epe, adversarial.n_samples))
            }
            EvalResult::Corruption {
                severity,
                per_kind,
                mc_epe,
            } => {
                for (kind, s) in per_kind {
                    rows.push(base(kind.name(), Some(*severity), s.mean_epe, s.n_samples));
                }
                rows.push(base("mean", Some(*severity), *mc_epe, r.result.n_samples()));
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.model, &a.corruption_kind, a.severity).cmp(&(&b.model, &b.corruption_kind, b.severity))
    });
    rows
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Encode(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json(records: &[EvalRecord], path: &Path) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(records).map_err(|e| Error::Encode(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json_report(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn emit_report(records: &[EvalRecord], format: ReportFormat, out: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config("no records to report".into()));
    }
    let out = out.as_ref();
    match format {
        ReportFormat::Csv => write_csv(&report_rows(records), out),
        ReportFormat::Json => write_json(records, out),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub model: String,
    pub threat: String,
    pub corruption_kind: String,
    pub severity: Option<u8>,
    pub x_dataset: String,
    pub x_epe: f64,
    pub y_dataset: String,
    pub y_epe: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    pub points: Vec<ScatterPoint>,
    pub r: f64,
}

type Key = (String, String, String, Option<u8>);

fn keyed(records: &[EvalRecord], side: &str) -> Result<BTreeMap<Key, ReportRow>> {
    let mut out = BTreeMap::new();
    for row in report_rows(records) {
        let key = (
            row.model.clone(),
            row.threat.clone(),
            row.corruption_kind.clone(),
            row.severity,
        );
        if out.contains_key(&key) {
            return Err(Error::Config(format!(
                "{side} records contain {} {} {} twice",
                key.0, key.1, key.2
            )));
        }
        out.insert(key, row);
    }
    Ok(out)
}

/// Pairs report rows of two record sets on (model, threat, kind, severity)
/// and correlates their mean EPEs; optionally writes the scatter CSV.
pub fn correlate(xs: &[EvalRecord], ys: &[EvalRecord], scatter_csv: Option<&Path>) -> Result<Correlation> {
    let (x, y) = (keyed(xs, "x")?, keyed(ys, "y")?);
    let points: Vec<ScatterPoint> = x
        .iter()
        .filter_map(|(k, a)| {
            y.get(k).map(|b| ScatterPoint {
                model: k.0.clone(),
                threat: k.1.clone(),
                corruption_kind: k.2.clone(),
                severity: k.3,
                x_dataset: a.dataset.clone(),
                x_epe: a.mean_epe,
                y_dataset: b.dataset.clone(),
                y_epe: b.mean_epe,
            })
        })
        .collect();
    let r = pearson(
        &points.iter().map(|p| p.x_epe).collect::<Vec<_>>(),
        &points.iter().map(|p| p.y_epe).collect::<Vec<_>>(),
    )?;
    if let Some(path) = scatter_csv {
        write_csv(&points, path)?;
    }
    Ok(Correlation { points, r })
}
