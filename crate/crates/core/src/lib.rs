//! Elastic cloud/edge training pipelines.
//!
//! A training application is a DAG of stream operators. This crate places its
//! operator instances on a heterogeneous cloud/edge cluster while keeping
//! sensitive operators on the edge nodes that host their data, scales the
//! placement against a time-varying input rate, survives node failures, and
//! evaluates the whole thing in a deterministic discrete-event simulator.

// Validation writes `!(x > 0.0)` on purpose so that NaN fails too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app_model;
pub mod autoscaler;
pub mod cluster_model;
pub mod dnn_config;
pub mod placer;
pub mod simengine;

pub use app_model::{
    parse_scenario, render_scenario, topo_order, validate_app, ModelClass, OperatorKind,
    OperatorSpec, Scenario, ScenarioError, TrainingApp, Violation,
};
pub use autoscaler::{
    apply_decision, decide, observe, AutoscalePolicy, ScaleDecision, ScaleReason,
};
pub use cluster_model::{
    accuracy_after, apply_failure, device_epoch_time, Cluster, DeviceProfile, FailureEvent,
    FailureSchedule, NodeSpec, Tier, TrainingProfile,
};
pub use placer::{
    estimate_cost, feasible_nodes, optimal_place_bruteforce, place, rebalance, InstanceId,
    Placement, PlacementCost, PlacementError,
};
pub use simengine::{export_metrics, simulate, MetricsReport, Simulation, WorkloadTrace};
