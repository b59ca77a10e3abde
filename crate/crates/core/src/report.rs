//! JSON and CSV emission of study and diagnosis results.
//!
//! Frequencies are in Hz, compensation currents in p.u., outage sizes in both
//! MW and p.u. CSV numbers carry 17 significant digits so they parse back to
//! the same values as the JSON.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case_io::{Disturbance, NetworkCase};
use crate::contingency::{StudyReport, StudyRow};
use crate::droop::DroopOptions;
use crate::sparse_diag::{DiagnosisResult, SupportEntry};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("serialization: {0}")]
    Serialize(String),
    #[error("unknown output format {0:?} (expected json or csv)")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = ReportError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(ReportError::Format(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub case: String,
    pub bounds_hz: [f64; 2],
    pub droop_pct: f64,
    pub delta_hz: f64,
    pub tool_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Iters {
    pub outer: usize,
    pub inner: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    /// 1-based generator row of the tripped unit; absent for load steps.
    pub gen_id: Option<usize>,
    pub bus: i64,
    pub mw_lost: f64,
    pub pu_lost: f64,
    pub df_baseline_hz: Option<f64>,
    pub df_bounded_hz: Option<f64>,
    pub verdict: String,
    pub support: Vec<SupportEntry>,
    pub iters: Iters,
    pub wall_ms: f64,
    #[serde(default)]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub meta: Meta,
    pub rows: Vec<Row>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl Row {
    pub fn from_study_row(r: &StudyRow, base_mva: f64) -> Self {
        Self {
            gen_id: Some(r.gen_id.0),
            bus: r.bus,
            mw_lost: r.mw_lost,
            pu_lost: r.mw_lost / base_mva,
            df_baseline_hz: finite(r.df_baseline_hz),
            df_bounded_hz: finite(r.df_bounded_hz),
            verdict: r.verdict.as_str().to_string(),
            support: r.support.clone(),
            iters: Iters {
                outer: r.outer_iterations,
                inner: r.inner_iterations,
            },
            wall_ms: r.wall_ms,
            message: r.message.clone(),
        }
    }
}

impl Report {
    pub fn from_study(s: &StudyReport) -> Self {
        Self {
            meta: Meta {
                case: s.case.clone(),
                bounds_hz: [s.bounds_hz.0, s.bounds_hz.1],
                droop_pct: s.droop_pct,
                delta_hz: s.delta_hz,
                tool_version: TOOL_VERSION.to_string(),
            },
            rows: s
                .rows
                .iter()
                .map(|r| Row::from_study_row(r, s.base_mva))
                .collect(),
        }
    }

    /// Single-row report for one diagnosed disturbance of `net`.
    pub fn from_diagnosis(
        case: &str,
        net: &NetworkCase,
        bounds: (f64, f64),
        droop: &DroopOptions,
        d: &DiagnosisResult,
    ) -> Self {
        let (gen_id, bus) = match net.disturbances.last() {
            Some(Disturbance::GeneratorOutage { gen, bus_id, .. }) => (Some(gen.0), *bus_id),
            Some(Disturbance::LoadStep { bus_id, .. }) => (None, *bus_id),
            None => (None, net.buses[net.slack].id),
        };
        let mw = net.mw_lost();
        Self {
            meta: Meta {
                case: case.to_string(),
                bounds_hz: [bounds.0, bounds.1],
                droop_pct: droop.droop_pct,
                delta_hz: droop.smoothing_halfwidth,
                tool_version: TOOL_VERSION.to_string(),
            },
            rows: vec![Row {
                gen_id,
                bus,
                mw_lost: mw,
                pu_lost: mw / net.base_mva,
                df_baseline_hz: finite(d.df_baseline),
                df_bounded_hz: finite(d.df_bounded),
                verdict: d.verdict.as_str().to_string(),
                support: d.support.clone(),
                iters: Iters {
                    outer: d.outer_iterations,
                    inner: d.inner_iterations,
                },
                wall_ms: d.wall_ms,
                message: d.message.clone(),
            }],
        }
    }

    pub fn to_json(&self) -> Result<String, ReportError> {
        serde_json::to_string_pretty(self).map_err(|e| ReportError::Serialize(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        serde_json::from_str(text).map_err(|e| ReportError::Serialize(e.to_string()))
    }

    pub fn to_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let ser = |e: csv::Error| ReportError::Serialize(e.to_string());
        w.write_record(CSV_HEADER).map_err(ser)?;
        for r in &self.rows {
            w.write_record([
                r.gen_id.map(|g| g.to_string()).unwrap_or_default(),
                r.bus.to_string(),
                num(r.mw_lost),
                num(r.pu_lost),
                opt(r.df_baseline_hz),
                opt(r.df_bounded_hz),
                r.verdict.clone(),
                support_field(&r.support),
                r.iters.outer.to_string(),
                r.iters.inner.to_string(),
                num(r.wall_ms),
                r.message.clone().unwrap_or_default(),
            ])
            .map_err(ser)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| ReportError::Serialize(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| ReportError::Serialize(e.to_string()))
    }

    /// Two-column `(mw_lost, Δf)` series. `bounded` selects the bounded Δf.
    pub fn series_csv(&self, bounded: bool) -> String {
        let col = if bounded {
            "df_bounded_hz"
        } else {
            "df_baseline_hz"
        };
        let mut s = format!("mw_lost,{col}\n");
        for r in &self.rows {
            let v = if bounded {
                r.df_bounded_hz
            } else {
                r.df_baseline_hz
            };
            s.push_str(&format!("{},{}\n", num(r.mw_lost), opt(v)));
        }
        s
    }
}

pub const CSV_HEADER: [&str; 12] = [
    "gen_id",
    "bus",
    "mw_lost",
    "pu_lost",
    "df_baseline_hz",
    "df_bounded_hz",
    "verdict",
    "support",
    "iters_outer",
    "iters_inner",
    "wall_ms",
    "message",
];

/// 17 significant digits: enough to round-trip any f64.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// `bus:mag;bus:mag`
pub fn support_field(s: &[SupportEntry]) -> String {
    s.iter()
        .map(|e| format!("{}:{}", e.bus, num(e.n_mag_pu)))
        .collect::<Vec<_>>()
        .join(";")
}

/// Inverse of [`support_field`].
pub fn parse_support_field(s: &str) -> Option<Vec<(i64, f64)>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(';')
        .map(|p| {
            let (b, m) = p.split_once(':')?;
            Some((b.parse().ok()?, m.parse().ok()?))
        })
        .collect()
}

fn write(path: PathBuf, text: &str, out: &mut Vec<PathBuf>) -> Result<(), ReportError> {
    fs::write(&path, text).map_err(|e| ReportError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    out.push(path);
    Ok(())
}

/// Write the report in the requested formats plus the two plot series into
/// `dir`, named after the case. Returns the files written.
pub fn emit_report(
    report: &Report,
    formats: &[Format],
    dir: &Path,
) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(|e| ReportError::Io {
        path: dir.display().to_string(),
        msg: e.to_string(),
    })?;
    let stem = &report.meta.case;
    let mut out = Vec::new();
    if formats.contains(&Format::Json) {
        write(
            dir.join(format!("{stem}.json")),
            &report.to_json()?,
            &mut out,
        )?;
    }
    if formats.contains(&Format::Csv) {
        write(dir.join(format!("{stem}.csv")), &report.to_csv()?, &mut out)?;
    }
    write(
        dir.join(format!("{stem}_df_baseline.csv")),
        &report.series_csv(false),
        &mut out,
    )?;
    write(
        dir.join(format!("{stem}_df_bounded.csv")),
        &report.series_csv(true),
        &mut out,
    )?;
    Ok(out)
}
