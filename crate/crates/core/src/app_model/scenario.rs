use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{validate_app, TrainingApp, Violation, ViolationSet};
use crate::autoscaler::AutoscalePolicy;
use crate::cluster_model::{Cluster, FailureSchedule, TrainingProfile};
use crate::simengine::WorkloadTrace;
use crate::ModelClass;

/// One reproducible experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub horizon: f64,
    pub trace: WorkloadTrace,
    #[serde(default)]
    pub failures: FailureSchedule,
    pub app: TrainingApp,
    pub cluster: Cluster,
    #[serde(default)]
    pub policy: AutoscalePolicy,
    #[serde(default)]
    pub training: TrainingSettings,
    #[serde(default)]
    pub sim: SimSettings,
}

/// Training target and optional overrides of the built-in progress profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSettings {
    #[serde(default = "default_target_accuracy")]
    pub target_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_epoch_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

fn default_target_accuracy() -> f64 {
    0.98
}

impl Default for TrainingSettings {
    fn default() -> Self {
        TrainingSettings {
            target_accuracy: default_target_accuracy(),
            base_epoch_time: None,
            a_max: None,
            tau: None,
        }
    }
}

impl TrainingSettings {
    pub fn profile(&self, class: ModelClass) -> TrainingProfile {
        let mut p = TrainingProfile::builtin(class);
        if let Some(b) = self.base_epoch_time {
            p.base_epoch_time = b;
        }
        if let Some(a) = self.a_max {
            p.a_max = a;
        }
        if let Some(t) = self.tau {
            p.tau = t;
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalMode {
    /// Per-second arrivals drawn from a Poisson distribution around the trace rate.
    Poisson,
    /// Arrivals follow the trace exactly, carrying fractional tuples forward.
    Deterministic,
}

/// Simulator knobs that are not part of the application or cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    #[serde(default = "default_arrivals")]
    pub arrivals: ArrivalMode,
    /// Per-operator backlog cap; arrivals beyond it are dropped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_cap: Option<u64>,
    /// Seconds an instance is unavailable per unit of `state_size` when it moves.
    #[serde(default = "default_migration_time")]
    pub migration_time_per_state: f64,
    /// Seconds between training completion and the model being present on every node.
    #[serde(default = "default_replication_delay")]
    pub replication_delay: f64,
}

fn default_arrivals() -> ArrivalMode {
    ArrivalMode::Poisson
}
fn default_migration_time() -> f64 {
    0.1
}
fn default_replication_delay() -> f64 {
    1.0
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            arrivals: default_arrivals(),
            queue_cap: None,
            migration_time_per_state: default_migration_time(),
            replication_delay: default_replication_delay(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdKind {
    Operator,
    Node,
    Dataset,
    DeviceProfile,
}

impl fmt::Display for IdKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IdKind::Operator => "operator",
            IdKind::Node => "node",
            IdKind::Dataset => "dataset",
            IdKind::DeviceProfile => "device profile",
        })
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("syntax error{}: {message}", fmt_position(*.position))]
    Syntax {
        position: Option<(usize, usize)>,
        message: String,
    },
    #[error("unknown {kind} id `{id}`")]
    UnknownId { kind: IdKind, id: String },
    #[error("{}", fmt_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("override `{path}`: {reason}")]
    Override { path: String, reason: String },
}

fn fmt_position(position: Option<(usize, usize)>) -> String {
    match position {
        Some((line, col)) => format!(" at line {line}, column {col}"),
        None => String::new(),
    }
}

fn fmt_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

impl Scenario {
    /// First dangling cross-reference, in document order.
    pub fn unknown_reference(&self) -> Option<(IdKind, String)> {
        let ops: BTreeSet<&str> = self.app.operators.iter().map(|o| o.id.as_str()).collect();
        for (from, to) in &self.app.edges {
            for end in [from, to] {
                if !ops.contains(end.as_str()) {
                    return Some((IdKind::Operator, end.clone()));
                }
            }
        }
        let datasets: BTreeSet<&str> = self
            .cluster
            .nodes
            .iter()
            .flat_map(|n| n.hosted_datasets.iter().map(String::as_str))
            .collect();
        for op in &self.app.operators {
            if let Some(d) = op.sensitivity.as_deref().filter(|d| !d.is_empty()) {
                if !datasets.contains(d) {
                    return Some((IdKind::Dataset, d.to_string()));
                }
            }
        }
        for node in &self.cluster.nodes {
            if self.cluster.profile(&node.device).is_none() {
                return Some((IdKind::DeviceProfile, node.device.clone()));
            }
        }
        for ev in &self.failures.events {
            if self.cluster.node(&ev.node_id).is_none() {
                return Some((IdKind::Node, ev.node_id.clone()));
            }
        }
        None
    }

    /// Every invariant violated by the scenario, one entry per invariant.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = validate_app(&self.app);
        out.extend(self.cluster.violations(self.app.model_class));

        let mut v = ViolationSet::default();
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            v.add("horizon > 0", self.horizon.to_string());
        }
        for ev in &self.failures.events {
            if !(ev.time >= 0.0 && ev.time < self.horizon) {
                v.add(
                    "failure times < horizon",
                    format!("{} at {}", ev.node_id, ev.time),
                );
            }
        }
        for w in self.failures.events.windows(2) {
            if w[1].time < w[0].time {
                v.add(
                    "failure times non-decreasing",
                    format!("{} after {}", w[1].time, w[0].time),
                );
            }
        }
        let bp = &self.trace.breakpoints;
        if bp.is_empty() {
            v.add("trace non-empty", "no breakpoints");
        } else if bp[0].0 != 0.0 {
            v.add("trace starts at 0", bp[0].0.to_string());
        }
        for w in bp.windows(2) {
            if !(w[1].0 > w[0].0) {
                v.add(
                    "trace times strictly increasing",
                    format!("{} after {}", w[1].0, w[0].0),
                );
            }
        }
        for (t, r) in bp {
            if !(*r >= 0.0) || !r.is_finite() {
                v.add("rate >= 0", format!("{r} at {t}"));
            }
        }
        let mut rest = v.into_vec();
        out.append(&mut rest);
        out.extend(self.policy.violations());

        let mut v = ViolationSet::default();
        let t = &self.training;
        if !(t.target_accuracy > 0.0 && t.target_accuracy <= 1.0) {
            v.add("0 < target_accuracy <= 1", t.target_accuracy.to_string());
        }
        let profile = t.profile(self.app.model_class);
        for name in profile.violations() {
            v.add(name, profile.model_class.to_string());
        }
        let s = &self.sim;
        if !(s.migration_time_per_state >= 0.0) || !s.migration_time_per_state.is_finite() {
            v.add(
                "migration_time_per_state >= 0",
                s.migration_time_per_state.to_string(),
            );
        }
        if !(s.replication_delay >= 0.0) || !s.replication_delay.is_finite() {
            v.add("replication_delay >= 0", s.replication_delay.to_string());
        }
        out.extend(v.into_vec());
        out
    }

    pub fn check(&self) -> Result<(), ScenarioError> {
        if let Some((kind, id)) = self.unknown_reference() {
            return Err(ScenarioError::UnknownId { kind, id });
        }
        let violations = self.violations();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(violations))
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

fn syntax(text: &str, err: toml::de::Error) -> ScenarioError {
    ScenarioError::Syntax {
        position: err.span().map(|s| line_col(text, s.start)),
        message: err.message().trim().to_string(),
    }
}

/// Parses and fully validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    parse_scenario_with_overrides(text, &[])
}

/// Like [`parse_scenario`], applying dotted-path `key=value` overrides first.
pub fn parse_scenario_with_overrides(
    text: &str,
    overrides: &[(String, String)],
) -> Result<Scenario, ScenarioError> {
    if text.trim().is_empty() {
        return Err(ScenarioError::Syntax {
            position: Some((1, 1)),
            message: "empty document".into(),
        });
    }
    let scenario: Scenario = if overrides.is_empty() {
        toml::from_str(text).map_err(|e| syntax(text, e))?
    } else {
        let table: toml::Table = toml::from_str(text).map_err(|e| syntax(text, e))?;
        toml::Value::Table(apply_overrides(table, overrides)?)
            .try_into()
            .map_err(|e: toml::de::Error| ScenarioError::Syntax {
                position: None,
                message: e.message().trim().to_string(),
            })?
    };
    scenario.check()?;
    Ok(scenario)
}

/// Sets each dotted path to its value. Values are read as TOML when they
/// parse as such, else as bare strings. Numeric segments index arrays.
pub fn apply_overrides(
    table: toml::Table,
    overrides: &[(String, String)],
) -> Result<toml::Table, ScenarioError> {
    let mut root = toml::Value::Table(table);
    for (path, raw) in overrides {
        let err = |reason: &str| ScenarioError::Override {
            path: path.clone(),
            reason: reason.into(),
        };
        let value = parse_override_value(raw);
        let segments: Vec<&str> = path.split('.').collect();
        if segments.iter().any(|s| s.is_empty()) {
            return Err(err("empty path segment"));
        }
        let (last, parents) = segments
            .split_last()
            .expect("split yields at least one segment");
        let mut cursor = &mut root;
        for seg in parents {
            cursor = match cursor {
                toml::Value::Table(t) => t
                    .entry(seg.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new())),
                toml::Value::Array(a) => {
                    let idx: usize = seg
                        .parse()
                        .map_err(|_| err("array segment must be an index"))?;
                    a.get_mut(idx)
                        .ok_or_else(|| err("array index out of range"))?
                }
                _ => return Err(err("path descends into a scalar")),
            };
        }
        match cursor {
            toml::Value::Table(t) => {
                t.insert(last.to_string(), value);
            }
            toml::Value::Array(a) => {
                let idx: usize = last
                    .parse()
                    .map_err(|_| err("array segment must be an index"))?;
                *a.get_mut(idx)
                    .ok_or_else(|| err("array index out of range"))? = value;
            }
            _ => return Err(err("path descends into a scalar")),
        }
    }
    match root {
        toml::Value::Table(t) => Ok(t),
        _ => unreachable!("root stays a table"),
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Serializes a scenario back into the document format.
pub fn render_scenario(scenario: &Scenario) -> String {
    toml::to_string(scenario).expect("scenario values are always representable")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const CHAIN: &str = include_str!("../../../../scenarios/chain_placement.toml");

    #[test]
    fn chain_document_parses() {
        let s = parse_scenario(CHAIN).unwrap();
        assert_eq!(s.app.operators.len(), 4);
        assert_eq!(s.cluster.nodes.len(), 3);
    }

    #[test]
    fn empty_document_is_a_syntax_error() {
        assert!(matches!(
            parse_scenario(""),
            Err(ScenarioError::Syntax { .. })
        ));
        assert!(matches!(
            parse_scenario("  \n"),
            Err(ScenarioError::Syntax { .. })
        ));
    }

    #[test]
    fn syntax_errors_carry_a_position() {
        let text = "seed = 1\nhorizon = = 3\n";
        match parse_scenario(text) {
            Err(ScenarioError::Syntax {
                position: Some((line, _)),
                ..
            }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_operator_in_edge_is_named() {
        let text = CHAIN.replace("\"C -> D\"", "\"C -> Z\"");
        match parse_scenario(&text) {
            Err(ScenarioError::UnknownId {
                kind: IdKind::Operator,
                id,
            }) => assert_eq!(id, "Z"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_failure_node_is_named() {
        let o = [("failures".to_string(), "[[1.0, \"ghost\"]]".to_string())];
        match parse_scenario_with_overrides(CHAIN, &o) {
            Err(ScenarioError::UnknownId {
                kind: IdKind::Node,
                id,
            }) => assert_eq!(id, "ghost"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariant_violations_are_named() {
        let o = [
            ("policy.theta_down".to_string(), "0.9".to_string()),
            ("horizon".to_string(), "-1.0".to_string()),
        ];
        match parse_scenario_with_overrides(CHAIN, &o) {
            Err(ScenarioError::Invalid(v)) => {
                let names: Vec<_> = v.iter().map(|v| v.invariant.as_str()).collect();
                assert!(names.contains(&"theta_down < theta_up"), "{names:?}");
                assert!(names.contains(&"horizon > 0"), "{names:?}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_reach_into_arrays() {
        let o = [
            ("seed".to_string(), "7".to_string()),
            (
                "cluster.nodes.0.device".to_string(),
                "Quadro-K4000".to_string(),
            ),
        ];
        let s = parse_scenario_with_overrides(CHAIN, &o).unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.cluster.nodes[0].device, "Quadro-K4000");

        let bad = [("cluster.nodes.9.device".to_string(), "x".to_string())];
        assert!(matches!(
            parse_scenario_with_overrides(CHAIN, &bad),
            Err(ScenarioError::Override { .. })
        ));
    }

    #[test]
    fn render_then_parse_is_identity() {
        let s = parse_scenario(CHAIN).unwrap();
        let again = parse_scenario(&render_scenario(&s)).unwrap();
        assert_eq!(s, again);
    }
}
