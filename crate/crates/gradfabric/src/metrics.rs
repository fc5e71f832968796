//! Run artifacts: metrics table, run manifest, and per-event trace.
//!
//! Formats are fixed so runs can be diffed byte for byte. The metrics table
//! is comma-separated with the header `metric,name,value,unit`; values use
//! Rust's shortest round-trip float formatting. The manifest echoes the
//! resolved configuration as structured text. The trace is one JSON record
//! per line, ordered by time.

use std::fmt::Write as _;

use serde::Serialize;

use crate::simlab::RunMetrics;
use crate::{Error, Result};

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub name: String,
    pub value: f64,
    pub unit: String,
}

impl MetricRow {
    pub fn new(metric: &str, name: &str, value: f64, unit: &str) -> Self {
        MetricRow { metric: metric.into(), name: name.into(), value, unit: unit.into() }
    }
}

/// Flatten a run into table rows, in a fixed order.
pub fn metrics_rows(m: &RunMetrics) -> Vec<MetricRow> {
    let mut rows = vec![
        MetricRow::new("commits", "total", m.commits.len() as f64, "count"),
        MetricRow::new("drops", "total", m.drops as f64, "count"),
        MetricRow::new("pushes", "total", m.pushes as f64, "count"),
        MetricRow::new("batches", "total", m.batches as f64, "count"),
        MetricRow::new("sync_rounds", "total", m.sync_rounds as f64, "count"),
    ];
    if m.duration_s > 0.0 {
        rows.push(MetricRow::new(
            "commits",
            "per_second",
            m.commits.len() as f64 / m.duration_s,
            "1/s",
        ));
    }
    if !m.commits.is_empty() {
        let delays: Vec<f64> = m.commits.iter().map(|c| c.delay as f64).collect();
        let mean = delays.iter().sum::<f64>() / delays.len() as f64;
        let max = delays.iter().fold(0.0f64, |a, b| a.max(*b));
        rows.push(MetricRow::new("delay", "mean", mean, "versions"));
        rows.push(MetricRow::new("delay", "max", max, "versions"));
    }
    rows.push(MetricRow::new("bytes", "to_server", m.bytes_to_server, "bytes"));
    rows.push(MetricRow::new("bytes", "to_aggregators", m.bytes_to_aggregators, "bytes"));
    rows.push(MetricRow::new("bytes", "to_replica", m.bytes_to_replica, "bytes"));
    rows.push(MetricRow::new("replication", "delayed_commits", m.delayed_commits as f64, "count"));
    rows.push(MetricRow::new(
        "replication",
        "punted_updates",
        m.punted_replica_updates as f64,
        "count",
    ));
    if !m.divergence_trace.is_empty() {
        let peak = m.divergence_trace.iter().fold(0.0f64, |a, (_, b)| a.max(*b));
        rows.push(MetricRow::new("replication", "peak_bound", peak, "norm"));
    }
    for ((src, dst), bytes) in &m.bytes_per_link {
        rows.push(MetricRow::new("link", &format!("{src}->{dst}"), *bytes, "bytes"));
    }
    if let Some((t, gap)) = m.loss_trace.last() {
        rows.push(MetricRow::new("lab", "iterations", *t as f64, "count"));
        rows.push(MetricRow::new("lab", "final_gap", *gap, "loss"));
        rows.push(MetricRow::new("lab", "diverged", m.diverged as u64 as f64, "flag"));
    }
    if let Some(t) = m.iterations_to_target {
        rows.push(MetricRow::new("lab", "iterations_to_target", t as f64, "count"));
    }
    if let Some(s) = m.seconds_to_target {
        rows.push(MetricRow::new("lab", "seconds_to_target", s, "s"));
    }
    rows
}

/// Render rows as the documented comma-separated table.
pub fn render_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,name,value,unit\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.metric, r.name, r.value, r.unit).expect("string write");
    }
    out
}

/// One line of the event trace.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Commit { t: f64, id: u64, worker: u32, position: u64, version: u64, delay: u64 },
    Drop { t: f64, id: u64, reason: String },
    Divergence { t: f64, bound: f64 },
    Loss { iteration: u64, gap: f64 },
}

impl TraceEvent {
    fn key(&self) -> (f64, u8, u64) {
        match self {
            TraceEvent::Drop { t, id, .. } => (*t, 0, *id),
            TraceEvent::Commit { t, id, .. } => (*t, 1, *id),
            TraceEvent::Divergence { t, .. } => (*t, 2, 0),
            TraceEvent::Loss { iteration, .. } => (*iteration as f64, 0, *iteration),
        }
    }
}

/// All of a run's events, in time order.
pub fn trace_events(m: &RunMetrics) -> Vec<TraceEvent> {
    let mut events: Vec<TraceEvent> = Vec::new();
    for c in &m.commits {
        events.push(TraceEvent::Commit {
            t: c.time,
            id: c.id,
            worker: c.worker,
            position: c.position,
            version: c.version,
            delay: c.delay,
        });
    }
    for (t, id, reason) in &m.drop_log {
        events.push(TraceEvent::Drop { t: *t, id: *id, reason: reason.clone() });
    }
    for (t, bound) in &m.divergence_trace {
        events.push(TraceEvent::Divergence { t: *t, bound: *bound });
    }
    for (iteration, gap) in &m.loss_trace {
        events.push(TraceEvent::Loss { iteration: *iteration, gap: *gap });
    }
    events.sort_by(|a, b| {
        let (ta, ka, ia) = a.key();
        let (tb, kb, ib) = b.key();
        ta.total_cmp(&tb).then(ka.cmp(&kb)).then(ia.cmp(&ib))
    });
    events
}

/// Render events as line-delimited JSON, one record per line.
pub fn render_trace(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace event serializes"));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config: &'a T,
}

/// Manifest echoing the resolved configuration, as structured text.
pub fn render_manifest<T: Serialize>(command: &str, seed: u64, config: &T) -> Result<String> {
    let m = Manifest {
        tool: "gradfabric",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        config,
    };
    toml::to_string_pretty(&m).map_err(|e| Error::Config(format!("manifest serialization: {e}")))
}
