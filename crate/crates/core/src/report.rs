//! Per-request records, run summary, the error metric and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::engine::{EventLog, Micros};
use crate::trace::{AccessMode, Op, Origin};

pub const REQUESTS_HEADER: &str = "# iosim-requests v1";
pub const SUMMARY_HEADER: &str = "# iosim-summary v1";
pub const BASELINE_HEADER: &str = "# iosim-baseline v1";

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("measured value is zero; the error metric is undefined")]
    ZeroBaseline,
    #[error("baseline line {line}: {reason}")]
    Baseline { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestRecord {
    pub id: u64,
    pub issue_us: Micros,
    pub complete_us: Micros,
    pub latency_us: Micros,
    pub bytes: u64,
    pub origin: Origin,
    pub op: Op,
    pub mode: AccessMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub requests: u64,
    pub total_bytes: u64,
    pub total_response_us: u64,
    pub span_us: u64,
    pub throughput_bytes_per_s: f64,
    /// `(requests, total latency)` per access mode, APP origin only.
    pub per_mode: BTreeMap<&'static str, (u64, u64)>,
}

impl Summary {
    pub fn from_records(records: &[RequestRecord]) -> Self {
        let app = || records.iter().filter(|r| r.origin == Origin::App);
        let total_bytes = records.iter().map(|r| r.bytes).sum();
        let first = records.iter().map(|r| r.issue_us).min().unwrap_or(0);
        let last = records.iter().map(|r| r.complete_us).max().unwrap_or(0);
        let span_us = last - first;
        let throughput_bytes_per_s = if span_us == 0 { 0.0 } else { total_bytes as f64 * 1e6 / span_us as f64 };
        let mut per_mode = BTreeMap::new();
        for r in app() {
            let e = per_mode.entry(r.mode.as_str()).or_insert((0, 0));
            e.0 += 1;
            e.1 += r.latency_us;
        }
        Self {
            requests: records.len() as u64,
            total_bytes,
            total_response_us: app().map(|r| r.latency_us).sum(),
            span_us,
            throughput_bytes_per_s,
            per_mode,
        }
    }

    pub fn to_text(&self, config_echo: &[(String, String)]) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        let _ = writeln!(out, "requests={}", self.requests);
        let _ = writeln!(out, "total_bytes={}", self.total_bytes);
        let _ = writeln!(out, "total_response_us={}", self.total_response_us);
        let _ = writeln!(out, "span_us={}", self.span_us);
        let _ = writeln!(out, "throughput_bytes_per_s={:.3}", self.throughput_bytes_per_s);
        for (mode, (n, lat)) in &self.per_mode {
            let _ = writeln!(out, "mode.{mode}.requests={n}");
            let _ = writeln!(out, "mode.{mode}.total_response_us={lat}");
        }
        for (k, v) in config_echo {
            let _ = writeln!(out, "config.{k}={v}");
        }
        out
    }
}

/// `100 * |measured - simulated| / measured`.
pub fn error_percent(measured: f64, simulated: f64) -> Result<f64, ReportError> {
    if measured == 0.0 {
        return Err(ReportError::ZeroBaseline);
    }
    Ok(100.0 * (measured - simulated).abs() / measured)
}

pub fn requests_csv(records: &[RequestRecord]) -> String {
    let mut out = format!("{REQUESTS_HEADER}\nid,issue_us,complete_us,latency_us,bytes\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{},{}", r.id, r.issue_us, r.complete_us, r.latency_us, r.bytes);
    }
    out
}

/// Measured per-request latencies keyed by request id.
pub type Baseline = BTreeMap<u64, Micros>;

pub fn baseline_text(records: &[RequestRecord]) -> String {
    let mut out = format!("{BASELINE_HEADER}\nid,latency_us\n");
    for r in records {
        let _ = writeln!(out, "{},{}", r.id, r.latency_us);
    }
    out
}

pub fn parse_baseline(text: &str) -> Result<Baseline, ReportError> {
    let bad = |line: usize, reason: &str| ReportError::Baseline { line, reason: reason.to_string() };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == BASELINE_HEADER => {}
        _ => return Err(bad(1, "missing header")),
    }
    let mut out = Baseline::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() || line == "id,latency_us" {
            continue;
        }
        let (id, lat) = line.split_once(',').ok_or_else(|| bad(i + 1, "expected id,latency_us"))?;
        let id: u64 = id.trim().parse().map_err(|_| bad(i + 1, "bad id"))?;
        let lat: u64 = lat.trim().parse().map_err(|_| bad(i + 1, "bad latency"))?;
        out.insert(id, lat);
    }
    Ok(out)
}

/// Writes `requests.csv`, `summary.txt` and optionally `events.log`.
pub fn emit_reports(
    out_dir: &Path,
    records: &[RequestRecord],
    summary: &Summary,
    config_echo: &[(String, String)],
    events: Option<&EventLog>,
) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let mut put = |name: &str, body: String| -> io::Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, body)?;
        files.push(p);
        Ok(())
    };
    put("requests.csv", requests_csv(records))?;
    put("summary.txt", summary.to_text(config_echo))?;
    if let Some(log) = events {
        put("events.log", log.to_text())?;
    }
    Ok(files)
}
