use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::placer::Placement;

/// State after the tuple batch of one simulated second.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeRow {
    pub time: u64,
    pub input_rate: f64,
    pub injected: u64,
    /// Tuples/s taken off source queues.
    pub processed_rate: f64,
    pub alive_node_count: usize,
    pub active_node_count: usize,
    pub epochs: u32,
    pub accuracy: f64,
    pub ops: Vec<OpRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpRow {
    pub backlog: u64,
    pub parallelism: u32,
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRow {
    pub time: f64,
    pub kind: String,
    pub subject: String,
    pub detail: String,
}

/// Cumulative tuple accounting for one operator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpAccount {
    pub received: u64,
    pub processed: u64,
    pub dropped: u64,
    pub queued: u64,
    pub emitted: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Summary {
    pub seed: u64,
    pub horizon: f64,
    pub training_completion_time: f64,
    pub target_reached: bool,
    pub final_accuracy: f64,
    pub epochs: u32,
    pub total_migrations: u64,
    pub migration_cost: f64,
    pub replication_time: f64,
    pub replicated_nodes: usize,
    pub scale_decisions: u64,
    pub rolled_back_decisions: u64,
    pub injected: u64,
    pub dropped: u64,
    pub in_flight: u64,
    pub aborted: bool,
    pub abort_reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    /// Operator ids in topological order; column order of the per-op series.
    pub operators: Vec<String>,
    pub rows: Vec<TimeRow>,
    pub events: Vec<EventRow>,
    pub placements: Vec<(f64, Placement)>,
    /// (time, epochs, accuracy) at each completed epoch.
    pub accuracy_trajectory: Vec<(f64, u32, f64)>,
    pub accounts: BTreeMap<String, OpAccount>,
    /// Edges as (from, to), used to check stage-to-stage accounting.
    pub edges: Vec<(String, String)>,
    /// Final model version present on each node.
    pub model_versions: BTreeMap<String, u32>,
    pub summary: Summary,
}

impl MetricsReport {
    /// Tuple-accounting failures; empty when every stage balances.
    pub fn conservation_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (op, a) in &self.accounts {
            if a.received != a.processed + a.dropped + a.queued {
                out.push(format!(
                    "{op}: received {} != processed {} + dropped {} + queued {}",
                    a.received, a.processed, a.dropped, a.queued
                ));
            }
        }
        let has_pred: std::collections::BTreeSet<&str> =
            self.edges.iter().map(|(_, t)| t.as_str()).collect();
        let mut source_total = 0;
        for (op, a) in &self.accounts {
            if has_pred.contains(op.as_str()) {
                let upstream: u64 = self
                    .edges
                    .iter()
                    .filter(|(_, to)| to == op)
                    .map(|(from, _)| self.accounts.get(from).map_or(0, |u| u.emitted))
                    .sum();
                if upstream != a.received {
                    out.push(format!(
                        "{op}: received {} != upstream emitted {upstream}",
                        a.received
                    ));
                }
            } else {
                source_total += a.received;
            }
        }
        if source_total != self.summary.injected {
            out.push(format!(
                "sources received {source_total} != injected {}",
                self.summary.injected
            ));
        }
        out
    }

    /// Sum of all per-second backlogs for an operator column.
    pub fn backlog_series(&self, op: &str) -> Option<Vec<u64>> {
        let idx = self.operators.iter().position(|o| o == op)?;
        Some(self.rows.iter().map(|r| r.ops[idx].backlog).collect())
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x != 0.0 && !(1e-6..1e16).contains(&a) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("cannot write metrics to {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub const TIMESERIES_CSV: &str = "timeseries.csv";
pub const EVENTS_CSV: &str = "events.csv";
pub const SUMMARY_CSV: &str = "summary.csv";

pub fn timeseries_header(operators: &[String]) -> Vec<String> {
    let mut h: Vec<String> = [
        "time",
        "input_rate",
        "injected",
        "processed_rate",
        "alive_node_count",
        "active_node_count",
        "epochs",
        "accuracy",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for op in operators {
        h.push(format!("backlog_{op}"));
        h.push(format!("parallelism_{op}"));
        h.push(format!("utilization_{op}"));
    }
    h
}

fn summary_rows(s: &Summary) -> Vec<(&'static str, String)> {
    vec![
        ("seed", s.seed.to_string()),
        ("horizon", fmt_f64(s.horizon)),
        (
            "training_completion_time",
            fmt_f64(s.training_completion_time),
        ),
        ("target_reached", s.target_reached.to_string()),
        ("final_accuracy", fmt_f64(s.final_accuracy)),
        ("epochs", s.epochs.to_string()),
        ("total_migrations", s.total_migrations.to_string()),
        ("migration_cost", fmt_f64(s.migration_cost)),
        ("replication_time", fmt_f64(s.replication_time)),
        ("replicated_nodes", s.replicated_nodes.to_string()),
        ("scale_decisions", s.scale_decisions.to_string()),
        ("rolled_back_decisions", s.rolled_back_decisions.to_string()),
        ("injected", s.injected.to_string()),
        ("dropped", s.dropped.to_string()),
        ("in_flight", s.in_flight.to_string()),
        ("aborted", s.aborted.to_string()),
        ("abort_reason", s.abort_reason.clone()),
    ]
}

/// Writes `timeseries.csv`, `events.csv` and `summary.csv` into `dir`,
/// creating it if needed. Returns the written paths.
pub fn export_metrics(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>, ExportError> {
    fs::create_dir_all(dir).map_err(|source| ExportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let open = |name: &str| -> Result<(PathBuf, csv::Writer<fs::File>), ExportError> {
        let path = dir.join(name);
        let file = fs::File::create(&path).map_err(|source| ExportError::Io {
            path: path.clone(),
            source,
        })?;
        Ok((
            path,
            csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(file),
        ))
    };

    let (ts_path, mut w) = open(TIMESERIES_CSV)?;
    w.write_record(timeseries_header(&report.operators))?;
    for r in &report.rows {
        let mut rec = vec![
            r.time.to_string(),
            fmt_f64(r.input_rate),
            r.injected.to_string(),
            fmt_f64(r.processed_rate),
            r.alive_node_count.to_string(),
            r.active_node_count.to_string(),
            r.epochs.to_string(),
            fmt_f64(r.accuracy),
        ];
        for o in &r.ops {
            rec.push(o.backlog.to_string());
            rec.push(o.parallelism.to_string());
            rec.push(fmt_f64(o.utilization));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| ExportError::Io {
        path: ts_path.clone(),
        source,
    })?;

    let (ev_path, mut w) = open(EVENTS_CSV)?;
    w.write_record(["time", "kind", "subject", "detail"])?;
    for e in &report.events {
        w.write_record([
            fmt_f64(e.time),
            e.kind.clone(),
            e.subject.clone(),
            e.detail.clone(),
        ])?;
    }
    w.flush().map_err(|source| ExportError::Io {
        path: ev_path.clone(),
        source,
    })?;

    let (sum_path, mut w) = open(SUMMARY_CSV)?;
    w.write_record(["key", "value"])?;
    // An empty report has nothing to summarize.
    if !(report.rows.is_empty() && report.events.is_empty() && report.summary == Summary::default())
    {
        for (k, v) in summary_rows(&report.summary) {
            w.write_record([k, v.as_str()])?;
        }
    }
    w.flush().map_err(|source| ExportError::Io {
        path: sum_path.clone(),
        source,
    })?;

    Ok(vec![ts_path, ev_path, sum_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shortest_round_trip() {
        for x in [
            0.0,
            1.0,
            0.1,
            250.0,
            1.0 / 3.0,
            14.0 / 73.0,
            f64::MAX,
            1e-9,
            -2.5,
        ] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
        assert_eq!(fmt_f64(250.0), "250");
        assert_eq!(fmt_f64(f64::MAX), "1.7976931348623157e308");
    }

    #[test]
    fn empty_report_writes_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let files = export_metrics(&MetricsReport::default(), dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        for f in files {
            let text = fs::read_to_string(&f).unwrap();
            assert_eq!(text.lines().count(), 1, "{}", f.display());
        }
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        assert!(export_metrics(&MetricsReport::default(), &blocker.join("sub")).is_err());
    }
}
