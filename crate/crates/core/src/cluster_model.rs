//! Heterogeneous node pool, device speed profiles, training-progress curves
//! and the failure process.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::app_model::{ModelClass, Violation, ViolationSet};
use crate::placer::{InstanceId, Placement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Cloud,
    Edge,
}

/// Epoch-time divisor per model class, relative to the reference CPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub name: String,
    pub speedup: BTreeMap<ModelClass, f64>,
}

impl DeviceProfile {
    pub fn new(name: &str, mlp: f64, cnn: f64) -> Self {
        DeviceProfile {
            name: name.to_string(),
            speedup: BTreeMap::from([(ModelClass::Mlp, mlp), (ModelClass::Cnn, cnn)]),
        }
    }

    pub fn speedup_for(&self, class: ModelClass) -> Option<f64> {
        self.speedup.get(&class).copied()
    }
}

pub const REFERENCE_CPU: &str = "reference-CPU";
pub const TESLA_K20C: &str = "Tesla-K20c";
pub const QUADRO_K4000: &str = "Quadro-K4000";

/// Profiles available to every scenario. The two GPUs carry the measured
/// MLP/CNN speedups over the CPU; the embedded boards are nominal values
/// and are expected to be overridden per scenario.
pub fn builtin_profiles() -> Vec<DeviceProfile> {
    vec![
        DeviceProfile::new(REFERENCE_CPU, 1.0, 1.0),
        DeviceProfile::new(TESLA_K20C, 14.0, 73.0),
        DeviceProfile::new(QUADRO_K4000, 6.0, 38.0),
        DeviceProfile::new("Jetson-AGX", 4.0, 10.0),
        DeviceProfile::new("Kalray-Konic", 2.0, 6.0),
        DeviceProfile::new("RaspberryPi-3B+", 0.25, 0.1),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub tier: Tier,
    pub device: String,
    pub slots: u32,
    #[serde(default)]
    pub hosted_datasets: BTreeSet<String>,
    #[serde(default = "yes")]
    pub alive: bool,
    /// Whether the node is currently allocated to the application. Inactive
    /// nodes form the pool the autoscaler draws from.
    #[serde(default = "yes")]
    pub active: bool,
}

fn yes() -> bool {
    true
}

impl NodeSpec {
    /// Alive and allocated: the only nodes instances may be placed on.
    pub fn usable(&self) -> bool {
        self.alive && self.active
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cluster {
    pub pool_max: u32,
    pub nodes: Vec<NodeSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub profiles: Vec<DeviceProfile>,
}

impl Cluster {
    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut NodeSpec> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// Scenario-declared profiles shadow the built-ins of the same name.
    pub fn profile(&self, name: &str) -> Option<DeviceProfile> {
        self.profiles
            .iter()
            .find(|p| p.name == name)
            .cloned()
            .or_else(|| builtin_profiles().into_iter().find(|p| p.name == name))
    }

    pub fn speedup(&self, node_id: &str, class: ModelClass) -> Option<f64> {
        let node = self.node(node_id)?;
        self.profile(&node.device)?.speedup_for(class)
    }

    pub fn alive_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.alive).count()
    }

    pub fn active_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.usable()).count()
    }

    pub fn violations(&self, class: ModelClass) -> Vec<Violation> {
        let mut v = ViolationSet::default();
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                v.add("node ids unique", n.id.clone());
            }
            if n.slots < 1 {
                v.add("slots >= 1", n.id.clone());
            }
            if n.tier == Tier::Cloud && !n.hosted_datasets.is_empty() {
                v.add("hosted_datasets only on edge nodes", n.id.clone());
            }
            if let Some(p) = self.profile(&n.device) {
                if p.speedup_for(class).is_none() {
                    v.add(
                        "device declares model_class speedup",
                        format!("{} ({})", n.id, n.device),
                    );
                }
            }
        }
        for p in self.profiles.iter().chain(builtin_profiles().iter()) {
            if p.speedup.values().any(|s| !(*s > 0.0) || !s.is_finite()) {
                v.add("speedup > 0", p.name.clone());
            }
        }
        if self.nodes.is_empty() {
            v.add("cluster non-empty", "no nodes declared");
        }
        if self.alive_count() > self.pool_max as usize {
            v.add(
                "alive nodes <= pool_max",
                format!("{} > {}", self.alive_count(), self.pool_max),
            );
        }
        if self.pool_max < 1 {
            v.add("pool_max >= 1", self.pool_max.to_string());
        }
        v.into_vec()
    }
}

/// Accuracy curve and epoch cost of one model class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingProfile {
    pub model_class: ModelClass,
    /// Plateau accuracy.
    pub a_max: f64,
    /// Epochs-to-plateau time constant.
    pub tau: f64,
    /// Seconds per epoch on the reference CPU.
    pub base_epoch_time: f64,
}

impl TrainingProfile {
    // tau values put the first epoch reaching 0.98 at 5 (CNN) and 50 (MLP).
    pub const CNN_A_MAX: f64 = 0.9921;
    pub const CNN_TAU: f64 = 1.1;
    pub const CNN_BASE_EPOCH_TIME: f64 = 73.0;
    pub const MLP_A_MAX: f64 = 0.9856;
    pub const MLP_TAU: f64 = 9.6;
    pub const MLP_BASE_EPOCH_TIME: f64 = 14.0;

    pub fn builtin(class: ModelClass) -> Self {
        match class {
            ModelClass::Mlp => TrainingProfile {
                model_class: class,
                a_max: Self::MLP_A_MAX,
                tau: Self::MLP_TAU,
                base_epoch_time: Self::MLP_BASE_EPOCH_TIME,
            },
            ModelClass::Cnn => TrainingProfile {
                model_class: class,
                a_max: Self::CNN_A_MAX,
                tau: Self::CNN_TAU,
                base_epoch_time: Self::CNN_BASE_EPOCH_TIME,
            },
        }
    }

    pub(crate) fn violations(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !(self.a_max > 0.0 && self.a_max <= 1.0) {
            out.push("0 < a_max <= 1");
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            out.push("tau > 0");
        }
        if !(self.base_epoch_time > 0.0) || !self.base_epoch_time.is_finite() {
            out.push("base_epoch_time > 0");
        }
        out
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("device profile `{profile}` declares no speedup for {class}")]
    MissingSpeedup { profile: String, class: ModelClass },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node `{0}` has already failed")]
    AlreadyFailed(String),
}

/// Seconds for one epoch on a device: base time divided by the device speedup.
pub fn device_epoch_time(
    profile: &DeviceProfile,
    training: &TrainingProfile,
) -> Result<f64, ClusterError> {
    let s =
        profile
            .speedup_for(training.model_class)
            .ok_or_else(|| ClusterError::MissingSpeedup {
                profile: profile.name.clone(),
                class: training.model_class,
            })?;
    Ok(training.base_epoch_time / s)
}

/// Saturating-exponential accuracy after a number of completed epochs.
pub fn accuracy_after(training: &TrainingProfile, epochs: u32) -> f64 {
    training.a_max * (1.0 - (-(epochs as f64) / training.tau).exp())
}

/// First epoch count at which `accuracy_after` reaches `target`, if it ever does.
pub fn epochs_to_reach(training: &TrainingProfile, target: f64) -> Option<u32> {
    if target > training.a_max {
        return None;
    }
    // Start from the analytic crossing and correct for rounding.
    let ratio = 1.0 - target / training.a_max;
    let guess = if ratio <= 0.0 {
        u32::MAX as f64
    } else {
        (-training.tau * ratio.ln()).ceil()
    };
    let mut e = guess.clamp(0.0, 1e7) as u32;
    while e > 0 && accuracy_after(training, e - 1) >= target {
        e -= 1;
    }
    while accuracy_after(training, e) < target {
        e = e.checked_add(1)?;
        if e > 10_000_000 {
            return None;
        }
    }
    Some(e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, String)", into = "(f64, String)")]
pub struct FailureEvent {
    pub time: f64,
    pub node_id: String,
}

impl From<(f64, String)> for FailureEvent {
    fn from((time, node_id): (f64, String)) -> Self {
        FailureEvent { time, node_id }
    }
}

impl From<FailureEvent> for (f64, String) {
    fn from(e: FailureEvent) -> Self {
        (e.time, e.node_id)
    }
}

/// Timed permanent node failures.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FailureSchedule {
    pub events: Vec<FailureEvent>,
}

/// Marks a node as permanently failed and lists the instances it was running.
pub fn apply_failure(
    cluster: &Cluster,
    placement: &Placement,
    node_id: &str,
    _time: f64,
) -> Result<(Cluster, Vec<InstanceId>), ClusterError> {
    let mut next = cluster.clone();
    let node = next
        .node_mut(node_id)
        .ok_or_else(|| ClusterError::UnknownNode(node_id.to_string()))?;
    if !node.alive {
        return Err(ClusterError::AlreadyFailed(node_id.to_string()));
    }
    node.alive = false;
    let evicted = placement
        .assignment
        .iter()
        .filter(|(_, n)| n.as_str() == node_id)
        .map(|(i, _)| i.clone())
        .collect();
    Ok((next, evicted))
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn node(id: &str, tier: Tier, device: &str, slots: u32, datasets: &[&str]) -> NodeSpec {
        NodeSpec {
            id: id.to_string(),
            tier,
            device: device.to_string(),
            slots,
            hosted_datasets: datasets.iter().map(|d| d.to_string()).collect(),
            alive: true,
            active: true,
        }
    }

    pub fn cluster(nodes: Vec<NodeSpec>) -> Cluster {
        Cluster {
            pool_max: nodes.len() as u32,
            nodes,
            profiles: Vec::new(),
        }
    }

    /// A cloud node plus two edge nodes hosting the `vehicle` dataset.
    pub fn cloud_and_two_edges(cloud_slots: u32, edge_slots: u32) -> Cluster {
        cluster(vec![
            node("cloud", Tier::Cloud, TESLA_K20C, cloud_slots, &[]),
            node("edge1", Tier::Edge, "Jetson-AGX", edge_slots, &["vehicle"]),
            node("edge2", Tier::Edge, "Jetson-AGX", edge_slots, &["vehicle"]),
        ])
    }
}
