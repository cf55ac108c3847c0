//! Reactive threshold autoscaler.
//!
//! Operators whose utilization exceeds `theta_up` gain one replica per
//! decision, activating `node_step` more nodes when the new replicas do not
//! fit. When every operator is below `theta_down` the least-utilized scalable
//! operator loses one replica and any node it leaves empty is released.
//! Decisions are spaced at least `cooldown` seconds apart by the caller.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::app_model::{TrainingApp, Violation, ViolationSet};
use crate::cluster_model::{Cluster, Tier};
use crate::placer::{rebalance, InstanceId, Placement, PlacementError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoscalePolicy {
    pub theta_up: f64,
    pub theta_down: f64,
    pub cooldown: f64,
    pub window: f64,
    pub node_step: u32,
}

impl Default for AutoscalePolicy {
    fn default() -> Self {
        AutoscalePolicy {
            theta_up: 0.8,
            theta_down: 0.3,
            cooldown: 30.0,
            window: 60.0,
            node_step: 1,
        }
    }
}

impl AutoscalePolicy {
    pub fn violations(&self) -> Vec<Violation> {
        let mut v = ViolationSet::default();
        if !(self.theta_up > 0.0 && self.theta_up <= 1.0) {
            v.add("0 < theta_up <= 1", self.theta_up.to_string());
        }
        if !(self.theta_down >= 0.0 && self.theta_down < 1.0) {
            v.add("0 <= theta_down < 1", self.theta_down.to_string());
        }
        if !(self.theta_down < self.theta_up) {
            v.add(
                "theta_down < theta_up",
                format!("{} >= {}", self.theta_down, self.theta_up),
            );
        }
        if !(self.cooldown > 0.0) || !self.cooldown.is_finite() {
            v.add("cooldown > 0", self.cooldown.to_string());
        }
        if !(self.window > 0.0) || !self.window.is_finite() {
            v.add("window > 0", self.window.to_string());
        }
        if self.node_step < 1 {
            v.add("node_step >= 1", self.node_step.to_string());
        }
        v.into_vec()
    }
}

/// One second of observations for an operator, all in reference work units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OpSample {
    /// Work arriving per second.
    pub demand: f64,
    /// Work the placed instances can perform per second.
    pub capacity: f64,
    /// Work waiting in the operator's queues at the end of the second.
    pub backlog: f64,
}

/// Per-operator samples taken at the same instant.
pub type MetricsSample = BTreeMap<String, OpSample>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trend {
    Rising,
    Flat,
    Falling,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpUtilization {
    pub utilization: f64,
    pub trend: Trend,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UtilizationStats {
    pub per_op: BTreeMap<String, OpUtilization>,
}

impl UtilizationStats {
    pub fn uniform(ops: &[&str], utilization: f64) -> Self {
        UtilizationStats {
            per_op: ops
                .iter()
                .map(|o| {
                    (
                        o.to_string(),
                        OpUtilization {
                            utilization,
                            trend: Trend::Flat,
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ObserveError {
    #[error("metrics window is empty")]
    EmptyWindow,
}

const TREND_DEAD_BAND: f64 = 0.05;

/// Summarizes a window of one-second samples.
///
/// Utilization is mean demand plus the final backlog spread over the window,
/// divided by mean capacity. The trend compares the mean offered load
/// (demand plus backlog) of the first and last halves of the window.
pub fn observe(window: &[MetricsSample]) -> Result<UtilizationStats, ObserveError> {
    if window.is_empty() {
        return Err(ObserveError::EmptyWindow);
    }
    let ops: BTreeSet<&String> = window.iter().flat_map(|s| s.keys()).collect();
    let n = window.len() as f64;
    let mut per_op = BTreeMap::new();
    for op in ops {
        let series: Vec<OpSample> = window
            .iter()
            .map(|s| s.get(op).copied().unwrap_or_default())
            .collect();
        let demand = series.iter().map(|s| s.demand).sum::<f64>() / n;
        let capacity = series.iter().map(|s| s.capacity).sum::<f64>() / n;
        let backlog = series.last().map_or(0.0, |s| s.backlog);
        let need = demand + backlog / n;
        let utilization = if need <= 0.0 {
            0.0
        } else if capacity <= 0.0 {
            f64::MAX
        } else {
            need / capacity
        };
        let half = series.len() / 2;
        let load = |s: &[OpSample]| {
            if s.is_empty() {
                0.0
            } else {
                s.iter().map(|x| x.demand + x.backlog).sum::<f64>() / s.len() as f64
            }
        };
        let first = load(&series[..half]);
        let last = load(&series[series.len() - half..]);
        let trend = if half == 0 {
            Trend::Flat
        } else if last > first * (1.0 + TREND_DEAD_BAND) && last > 0.0 {
            Trend::Rising
        } else if last < first * (1.0 - TREND_DEAD_BAND) {
            Trend::Falling
        } else {
            Trend::Flat
        };
        per_op.insert(op.clone(), OpUtilization { utilization, trend });
    }
    Ok(UtilizationStats { per_op })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ScaleReason {
    Overload,
    Underload,
    FailureCompensation,
    None,
}

impl fmt::Display for ScaleReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleReason::Overload => "overload",
            ScaleReason::Underload => "underload",
            ScaleReason::FailureCompensation => "failure_compensation",
            ScaleReason::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleDecision {
    pub op_parallelism_delta: BTreeMap<String, i32>,
    pub node_delta: i32,
    pub reason: ScaleReason,
}

impl ScaleDecision {
    pub fn none() -> Self {
        ScaleDecision {
            op_parallelism_delta: BTreeMap::new(),
            node_delta: 0,
            reason: ScaleReason::None,
        }
    }

    pub fn is_none(&self) -> bool {
        self.reason == ScaleReason::None
    }
}

impl fmt::Display for ScaleDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ops: Vec<String> = self
            .op_parallelism_delta
            .iter()
            .map(|(o, d)| format!("{o}{d:+}"))
            .collect();
        write!(f, "ops=[{}] nodes={:+}", ops.join(" "), self.node_delta)
    }
}

fn inactive_available(cluster: &Cluster) -> usize {
    let headroom = (cluster.pool_max as usize).saturating_sub(cluster.active_count());
    let idle = cluster
        .nodes
        .iter()
        .filter(|n| n.alive && !n.active)
        .count();
    headroom.min(idle)
}

/// Chooses the next scaling action. Assumes the cooldown has elapsed.
pub fn decide(
    stats: &UtilizationStats,
    policy: &AutoscalePolicy,
    current: &Placement,
    app: &TrainingApp,
    cluster: &Cluster,
) -> ScaleDecision {
    let par = |op: &str| current.parallelism.get(op).copied().unwrap_or(0);

    let mut grow = BTreeMap::new();
    for (id, u) in &stats.per_op {
        let Some(op) = app.operator(id) else { continue };
        if u.utilization > policy.theta_up && par(id) < op.parallelism_max {
            grow.insert(id.clone(), 1);
        }
    }
    if !grow.is_empty() {
        let mut trial = current.clone();
        let mut fresh = Vec::new();
        for op in grow.keys() {
            let p = trial.parallelism.entry(op.clone()).or_insert(0);
            fresh.push(InstanceId::new(op, *p));
            *p += 1;
        }
        let fits = rebalance(&trial, app, cluster, &fresh).is_ok();
        let node_delta = if fits {
            0
        } else {
            (policy.node_step as usize).min(inactive_available(cluster)) as i32
        };
        return ScaleDecision {
            op_parallelism_delta: grow,
            node_delta,
            reason: ScaleReason::Overload,
        };
    }

    let all_idle = !stats.per_op.is_empty()
        && stats
            .per_op
            .values()
            .all(|u| u.utilization < policy.theta_down);
    if all_idle {
        let victim = stats
            .per_op
            .iter()
            .filter(|(id, _)| {
                app.operator(id)
                    .is_some_and(|o| par(id) > o.parallelism_min)
            })
            .min_by(|a, b| {
                a.1.utilization
                    .total_cmp(&b.1.utilization)
                    .then_with(|| a.0.cmp(b.0))
            });
        if let Some((id, _)) = victim {
            let last = InstanceId::new(id, par(id) - 1);
            let emptied = current
                .assignment
                .get(&last)
                .is_some_and(|node| current.instances_on(node).len() == 1);
            let node_delta = if emptied && cluster.active_count() > 1 {
                -1
            } else {
                0
            };
            return ScaleDecision {
                op_parallelism_delta: BTreeMap::from([(id.clone(), -1)]),
                node_delta,
                reason: ScaleReason::Underload,
            };
        }
    }
    ScaleDecision::none()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleOutcome {
    pub cluster: Cluster,
    pub placement: Placement,
    pub added: Vec<InstanceId>,
    /// Removed replicas and the node each one ran on.
    pub removed: Vec<(InstanceId, String)>,
    pub activated: Vec<String>,
    pub released: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ScaleError {
    #[error("decision out of bounds: {0}")]
    OutOfBounds(String),
    #[error("scaling infeasible: {0}")]
    Infeasible(#[from] PlacementError),
}

/// Applies a decision. On error nothing changes; the caller keeps its state.
pub fn apply_decision(
    decision: &ScaleDecision,
    app: &TrainingApp,
    cluster: &Cluster,
    placement: &Placement,
) -> Result<ScaleOutcome, ScaleError> {
    let mut outcome = ScaleOutcome {
        cluster: cluster.clone(),
        placement: placement.clone(),
        added: Vec::new(),
        removed: Vec::new(),
        activated: Vec::new(),
        released: Vec::new(),
        warnings: Vec::new(),
    };
    if decision.is_none() && decision.node_delta == 0 && decision.op_parallelism_delta.is_empty() {
        return Ok(outcome);
    }

    for (id, delta) in &decision.op_parallelism_delta {
        let op = app
            .operator(id)
            .ok_or_else(|| ScaleError::OutOfBounds(format!("unknown operator `{id}`")))?;
        let p = placement.parallelism.get(id).copied().unwrap_or(0) as i64 + *delta as i64;
        if p < op.parallelism_min as i64 || p > op.parallelism_max as i64 {
            return Err(ScaleError::OutOfBounds(format!(
                "`{id}` parallelism {p} outside [{}, {}]",
                op.parallelism_min, op.parallelism_max
            )));
        }
    }

    if decision.node_delta > 0 {
        let wanted = decision.node_delta as usize;
        let room = (cluster.pool_max as usize).saturating_sub(cluster.active_count());
        // Prefer idle nodes that can host at least one of the growing operators.
        let growing: Vec<_> = decision
            .op_parallelism_delta
            .iter()
            .filter(|(_, d)| **d > 0)
            .filter_map(|(id, _)| app.operator(id))
            .collect();
        let useful = |n: &crate::cluster_model::NodeSpec| {
            growing.iter().any(
                |op| match op.sensitivity.as_deref().filter(|d| !d.is_empty()) {
                    Some(d) => n.tier == Tier::Edge && n.hosted_datasets.contains(d),
                    None => true,
                },
            )
        };
        let mut idle: Vec<_> = cluster
            .nodes
            .iter()
            .filter(|n| n.alive && !n.active)
            .collect();
        idle.sort_by(|a, b| (!useful(a), &a.id).cmp(&(!useful(b), &b.id)));
        for n in idle.into_iter().take(wanted.min(room)) {
            outcome
                .cluster
                .node_mut(&n.id)
                .expect("node from same cluster")
                .active = true;
            outcome.activated.push(n.id.clone());
        }
        if outcome.activated.len() < wanted {
            outcome.warnings.push(format!(
                "requested {wanted} node(s), activated {}",
                outcome.activated.len()
            ));
        }
    }

    for (id, delta) in &decision.op_parallelism_delta {
        let p = outcome.placement.parallelism.get(id).copied().unwrap_or(0);
        if *delta < 0 {
            let keep = p - delta.unsigned_abs();
            for r in (keep..p).rev() {
                let inst = InstanceId::new(id, r);
                if let Some(node) = outcome.placement.assignment.remove(&inst) {
                    outcome.removed.push((inst, node));
                }
            }
            outcome.placement.parallelism.insert(id.clone(), keep);
        } else if *delta > 0 {
            for r in p..p + *delta as u32 {
                outcome.added.push(InstanceId::new(id, r));
            }
            outcome
                .placement
                .parallelism
                .insert(id.clone(), p + *delta as u32);
        }
    }
    if !outcome.added.is_empty() {
        outcome.placement = rebalance(&outcome.placement, app, &outcome.cluster, &outcome.added)?;
    }

    if decision.node_delta < 0 {
        let wanted = decision.node_delta.unsigned_abs() as usize;
        let load = outcome.placement.load();
        let just_emptied: BTreeSet<&str> =
            outcome.removed.iter().map(|(_, n)| n.as_str()).collect();
        let mut empty: Vec<&str> = outcome
            .cluster
            .nodes
            .iter()
            .filter(|n| n.usable() && !load.contains_key(n.id.as_str()))
            .map(|n| n.id.as_str())
            .collect();
        empty.sort_by(|a, b| {
            (!just_emptied.contains(a), std::cmp::Reverse(*a))
                .cmp(&(!just_emptied.contains(b), std::cmp::Reverse(*b)))
        });
        let room = outcome.cluster.active_count().saturating_sub(1);
        let release: Vec<String> = empty
            .into_iter()
            .take(wanted.min(room))
            .map(String::from)
            .collect();
        for id in &release {
            outcome
                .cluster
                .node_mut(id)
                .expect("node from same cluster")
                .active = false;
        }
        if release.len() < wanted {
            outcome.warnings.push(format!(
                "requested release of {wanted} node(s), no empty node for {}",
                wanted - release.len()
            ));
        }
        outcome.released = release;
    }
    Ok(outcome)
}
