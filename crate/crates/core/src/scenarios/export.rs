//! Run artifacts on disk and the cross-mode comparison built from them.
//!
//! A run directory holds `metrics.csv` (key,value), `latencies.csv` (one
//! row per sample), `summary.json` and `cloud_state.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{median, percentile, Metrics, OverlayMode, OverlayReport, RunMeta, RunOutcome, ScenarioKind};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("run directories disagree on {what}: {a} vs {b}")]
    Mismatch { what: &'static str, a: String, b: String },
    #[error("need at least two run directories, got {0}")]
    TooFew(usize),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExportError + '_ {
    move |source| ExportError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: usize,
    pub min: Option<u64>,
    pub median: Option<u64>,
    pub p95: Option<u64>,
    pub max: Option<u64>,
}

impl LatencySummary {
    pub fn of(values: &[u64]) -> Self {
        Self {
            count: values.len(),
            min: values.iter().min().copied(),
            median: median(values),
            p95: percentile(values, 95.0),
            max: values.iter().max().copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub meta: RunMeta,
    pub total_messages: u64,
    pub total_bytes: u64,
    pub server_messages: u64,
    pub server_bytes: u64,
    pub peer_messages: u64,
    pub peer_bytes: u64,
    pub upstream_messages: u64,
    pub upstream_bytes: u64,
    pub data_messages: u64,
    pub control_messages: u64,
    pub heartbeat_messages: u64,
    pub writes_issued: u64,
    pub wasted_bytes: u64,
    pub end_time_ms: u64,
    pub events: u64,
    pub quiesced: bool,
    pub missing_deltas: u64,
    pub latency: LatencySummary,
    pub overlay: OverlayReport,
}

impl Summary {
    pub fn of(meta: &RunMeta, m: &Metrics) -> Self {
        Self {
            meta: meta.clone(),
            total_messages: m.total_messages,
            total_bytes: m.total_bytes,
            server_messages: m.server_messages,
            server_bytes: m.server_bytes,
            peer_messages: m.peer_messages,
            peer_bytes: m.peer_bytes,
            upstream_messages: m.upstream_messages,
            upstream_bytes: m.upstream_bytes,
            data_messages: m.data_messages,
            control_messages: m.control_messages,
            heartbeat_messages: m.heartbeat_messages,
            writes_issued: m.writes_issued,
            wasted_bytes: m.wasted_bytes,
            end_time_ms: m.end_time_ms,
            events: m.events,
            quiesced: m.quiesced,
            missing_deltas: m.missing_deltas,
            latency: LatencySummary::of(&m.latency_values()),
            overlay: m.overlay.clone(),
        }
    }
}

/// Counter rows of `metrics.csv`, in their fixed order.
pub(crate) fn metric_rows(m: &Metrics) -> Vec<(String, String)> {
    let mut rows: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| rows.push((k.to_string(), v));
    for (c, s) in &m.channels {
        let n = c.name();
        put(&format!("{n}.sent"), s.sent.to_string());
        put(&format!("{n}.delivered"), s.delivered.to_string());
        put(&format!("{n}.dropped"), s.dropped.to_string());
        put(&format!("{n}.bytes"), s.bytes.to_string());
        put(&format!("{n}.data_messages"), s.data_messages.to_string());
        put(&format!("{n}.data_bytes"), s.data_bytes.to_string());
        put(&format!("{n}.control_messages"), s.control_messages().to_string());
        put(&format!("{n}.control_bytes"), s.control_bytes().to_string());
        put(&format!("{n}.heartbeat_messages"), s.heartbeat_messages.to_string());
    }
    put("server_messages", m.server_messages.to_string());
    put("server_bytes", m.server_bytes.to_string());
    put("peer_messages", m.peer_messages.to_string());
    put("peer_bytes", m.peer_bytes.to_string());
    put("upstream_messages", m.upstream_messages.to_string());
    put("upstream_bytes", m.upstream_bytes.to_string());
    put("total_messages", m.total_messages.to_string());
    put("total_bytes", m.total_bytes.to_string());
    put("data_messages", m.data_messages.to_string());
    put("control_messages", m.control_messages.to_string());
    put("heartbeat_messages", m.heartbeat_messages.to_string());
    put("writes_issued", m.writes_issued.to_string());
    put("wasted_bytes", m.wasted_bytes.to_string());
    put("latency_samples", m.latencies.len().to_string());
    put("end_time_ms", m.end_time_ms.to_string());
    put("events", m.events.to_string());
    put("quiesced", m.quiesced.to_string());
    put("missing_deltas", m.missing_deltas.to_string());
    let o = &m.overlay;
    put("overlay.reviews", o.reviews.to_string());
    put("overlay.max_degree", o.max_degree.to_string());
    put("overlay.degree_violations", o.degree_violations.to_string());
    put("overlay.floods", o.floods.to_string());
    put("overlay.max_flood_transmissions", o.max_flood_transmissions.to_string());
    put("overlay.flood_violations", o.flood_violations.to_string());
    put("overlay.links_at_end", o.links_at_end.to_string());
    put("overlay.max_link_span_m", format!("{:.3}", o.max_link_span_m));
    put("overlay.locality_violations", o.locality_violations.to_string());
    rows
}

pub(crate) fn metrics_csv(m: &Metrics) -> Result<Vec<u8>, ExportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["key", "value"])?;
    for (k, v) in metric_rows(m) {
        w.write_record([k, v])?;
    }
    w.into_inner().map_err(|e| ExportError::Csv(e.into_error().into()))
}

pub(crate) fn latencies_csv(m: &Metrics) -> Result<Vec<u8>, ExportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["origin", "seq", "receiver", "issued_at", "received_at", "latency_ms"])?;
    for s in &m.latencies {
        w.write_record([
            s.origin.0.to_string(),
            s.seq.to_string(),
            s.receiver.0.to_string(),
            s.issued_at.to_string(),
            s.received_at.to_string(),
            s.latency().to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| ExportError::Csv(e.into_error().into()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), ExportError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("plain data serializes");
    s.push(b'\n');
    s
}

/// Write every artifact of `run` into `dir`, creating it if needed.
pub fn export(run: &RunOutcome, dir: &Path) -> Result<Summary, ExportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write(&dir.join("metrics.csv"), &metrics_csv(&run.metrics)?)?;
    write(&dir.join("latencies.csv"), &latencies_csv(&run.metrics)?)?;
    let summary = Summary::of(&run.meta, &run.metrics);
    write(&dir.join("summary.json"), &pretty(&summary))?;
    let cloud: BTreeMap<String, serde_json::Value> =
        run.cloud.iter().map(|(o, c)| (o.0.to_string(), c.debug_json())).collect();
    write(&dir.join("cloud_state.json"), &pretty(&cloud))?;
    Ok(summary)
}

pub fn read_summary(dir: &Path) -> Result<Summary, ExportError> {
    let path = dir.join("summary.json");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&bytes).map_err(|source| ExportError::Json { path, source })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub dir: String,
    pub mode: OverlayMode,
    pub total_messages: u64,
    pub total_bytes: u64,
    pub server_messages: u64,
    pub peer_messages: u64,
    pub latency_median: Option<u64>,
    pub latency_p95: Option<u64>,
    /// Differences against the first row.
    pub delta_messages: i64,
    pub delta_bytes: i64,
}

/// Directional checks; `None` when the modes they need are absent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub rows: Vec<ComparisonRow>,
    pub glo_partial_fewer_messages_than_full: Option<bool>,
    pub glo_partial_fewer_bytes_than_full: Option<bool>,
    pub cs_server_messages_le_glo_partial: Option<bool>,
    pub glo_partial_more_peer_server_messages_than_full: Option<bool>,
    pub glo_latency_lower: Option<bool>,
    pub cloud_state_identical: bool,
}

impl Comparison {
    /// `key=value` lines for stdout.
    pub fn key_values(&self) -> Vec<String> {
        let b = |v: Option<bool>| v.map_or("na".to_string(), |b| b.to_string());
        let mut out = vec![format!("scenario={}", self.scenario), format!("seed={}", self.seed)];
        for r in &self.rows {
            let m = r.mode;
            out.push(format!("{m}.total_messages={}", r.total_messages));
            out.push(format!("{m}.total_bytes={}", r.total_bytes));
            out.push(format!("{m}.server_messages={}", r.server_messages));
            out.push(format!("{m}.peer_messages={}", r.peer_messages));
            out.push(format!("{m}.latency_median={}", r.latency_median.map_or("na".into(), |v| v.to_string())));
            out.push(format!("{m}.latency_p95={}", r.latency_p95.map_or("na".into(), |v| v.to_string())));
            out.push(format!("{m}.delta_messages={}", r.delta_messages));
            out.push(format!("{m}.delta_bytes={}", r.delta_bytes));
        }
        out.push(format!("glo_partial_fewer_messages_than_full={}", b(self.glo_partial_fewer_messages_than_full)));
        out.push(format!("glo_partial_fewer_bytes_than_full={}", b(self.glo_partial_fewer_bytes_than_full)));
        out.push(format!("cs_server_messages_le_glo_partial={}", b(self.cs_server_messages_le_glo_partial)));
        out.push(format!(
            "glo_partial_more_peer_server_messages_than_full={}",
            b(self.glo_partial_more_peer_server_messages_than_full)
        ));
        out.push(format!("glo_latency_lower={}", b(self.glo_latency_lower)));
        out.push(format!("cloud_state_identical={}", self.cloud_state_identical));
        out
    }

    pub fn to_json(&self) -> Vec<u8> {
        pretty(self)
    }
}

/// Compare completed run directories of one scenario and seed.
pub fn compare(dirs: &[PathBuf]) -> Result<Comparison, ExportError> {
    if dirs.len() < 2 {
        return Err(ExportError::TooFew(dirs.len()));
    }
    summarize_runs(dirs)
}

/// Like [`compare`] but accepts a single directory, whose checks then all
/// come out `None`.
pub fn summarize_runs(dirs: &[PathBuf]) -> Result<Comparison, ExportError> {
    if dirs.is_empty() {
        return Err(ExportError::TooFew(0));
    }
    let mut summaries = Vec::new();
    let mut states = Vec::new();
    for d in dirs {
        let s = read_summary(d)?;
        let path = d.join("cloud_state.json");
        states.push(fs::read(&path).map_err(io_err(&path))?);
        summaries.push(s);
    }
    let first = &summaries[0];
    for s in &summaries[1..] {
        if s.meta.scenario != first.meta.scenario {
            return Err(ExportError::Mismatch {
                what: "scenario",
                a: first.meta.scenario.to_string(),
                b: s.meta.scenario.to_string(),
            });
        }
        if s.meta.seed != first.meta.seed {
            return Err(ExportError::Mismatch { what: "seed", a: first.meta.seed.to_string(), b: s.meta.seed.to_string() });
        }
    }

    let rows: Vec<ComparisonRow> = dirs
        .iter()
        .zip(&summaries)
        .map(|(d, s)| ComparisonRow {
            dir: d.display().to_string(),
            mode: s.meta.mode,
            total_messages: s.total_messages,
            total_bytes: s.total_bytes,
            server_messages: s.server_messages,
            peer_messages: s.peer_messages,
            latency_median: s.latency.median,
            latency_p95: s.latency.p95,
            delta_messages: s.total_messages as i64 - first.total_messages as i64,
            delta_bytes: s.total_bytes as i64 - first.total_bytes as i64,
        })
        .collect();

    let by_mode = |m: OverlayMode| summaries.iter().find(|s| s.meta.mode == m);
    let partial = by_mode(OverlayMode::GloPartial);
    let full = by_mode(OverlayMode::GloFull);
    let cs = by_mode(OverlayMode::ClientServer);
    let both = |a: Option<&Summary>, b: Option<&Summary>, f: &dyn Fn(&Summary, &Summary) -> bool| {
        a.zip(b).map(|(a, b)| f(a, b))
    };
    let glo_median = [partial, full].into_iter().flatten().filter_map(|s| s.latency.median).min();
    let glo_latency_lower = match (glo_median, cs.and_then(|s| s.latency.median)) {
        (Some(g), Some(c)) => Some(g < c),
        _ => None,
    };

    Ok(Comparison {
        scenario: first.meta.scenario,
        seed: first.meta.seed,
        glo_partial_fewer_messages_than_full: both(partial, full, &|p, f| p.total_messages < f.total_messages),
        glo_partial_fewer_bytes_than_full: both(partial, full, &|p, f| p.total_bytes < f.total_bytes),
        cs_server_messages_le_glo_partial: both(cs, partial, &|c, p| c.server_messages <= p.server_messages),
        glo_partial_more_peer_server_messages_than_full: both(partial, full, &|p, f| {
            p.peer_messages + p.server_messages > f.peer_messages + f.server_messages
        }),
        glo_latency_lower,
        cloud_state_identical: states.windows(2).all(|w| w[0] == w[1]),
        rows,
    })
}
