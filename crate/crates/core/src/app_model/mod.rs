//! Training-application DAG and scenario documents.

mod scenario;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use scenario::{
    apply_overrides, parse_scenario, parse_scenario_with_overrides, render_scenario, ArrivalMode,
    IdKind, Scenario, ScenarioError, SimSettings, TrainingSettings,
};

/// Model family whose training-progress profile the application follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelClass {
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "CNN")]
    Cnn,
}

impl ModelClass {
    pub const ALL: [ModelClass; 2] = [ModelClass::Mlp, ModelClass::Cnn];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelClass::Mlp => "MLP",
            ModelClass::Cnn => "CNN",
        }
    }
}

impl fmt::Display for ModelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Source,
    Transform,
    Trainer,
    Aggregator,
    Sink,
}

/// One vertex of the training application.
///
/// `cost_per_tuple` is measured in work units on the reference CPU, which
/// delivers one work unit per second. An operator with `sensitivity` set may
/// only run on edge nodes hosting that dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    pub id: String,
    pub kind: OperatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<String>,
    pub selectivity: f64,
    pub cost_per_tuple: f64,
    pub parallelism_min: u32,
    pub parallelism_max: u32,
    pub state_size: f64,
}

impl OperatorSpec {
    pub fn is_sensitive(&self) -> bool {
        self.sensitivity.as_deref().is_some_and(|d| !d.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingApp {
    pub model_class: ModelClass,
    #[serde(with = "edge_list")]
    pub edges: Vec<(String, String)>,
    pub operators: Vec<OperatorSpec>,
}

impl TrainingApp {
    pub fn operator(&self, id: &str) -> Option<&OperatorSpec> {
        self.operators.iter().find(|o| o.id == id)
    }

    /// Operators with in-degree zero, sorted by id.
    pub fn sources(&self) -> Vec<&str> {
        let targets: BTreeSet<&str> = self.edges.iter().map(|(_, to)| to.as_str()).collect();
        let mut out: Vec<&str> = self
            .operators
            .iter()
            .map(|o| o.id.as_str())
            .filter(|id| !targets.contains(id))
            .collect();
        out.sort_unstable();
        out
    }

    /// Operators with out-degree zero, sorted by id.
    pub fn sinks(&self) -> Vec<&str> {
        let origins: BTreeSet<&str> = self.edges.iter().map(|(from, _)| from.as_str()).collect();
        let mut out: Vec<&str> = self
            .operators
            .iter()
            .map(|o| o.id.as_str())
            .filter(|id| !origins.contains(id))
            .collect();
        out.sort_unstable();
        out
    }

    /// Direct upstream operators of `id`, sorted.
    pub fn predecessors(&self, id: &str) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .edges
            .iter()
            .filter(|(_, to)| to == id)
            .map(|(from, _)| from.as_str())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn successor_map(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut succ: BTreeMap<&str, BTreeSet<&str>> = self
            .operators
            .iter()
            .map(|o| (o.id.as_str(), BTreeSet::new()))
            .collect();
        for (from, to) in &self.edges {
            if let Some(set) = succ.get_mut(from.as_str()) {
                set.insert(to.as_str());
            }
        }
        succ
    }
}

/// A failed invariant. `invariant` is a stable name used by the CLI and tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub invariant: String,
    pub detail: String,
}

impl Violation {
    pub fn new(invariant: impl Into<String>, detail: impl Into<String>) -> Self {
        Violation {
            invariant: invariant.into(),
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.invariant, self.detail)
    }
}

/// Collects offenders per invariant so each failed invariant is reported once.
#[derive(Default)]
pub(crate) struct ViolationSet {
    by_name: BTreeMap<&'static str, Vec<String>>,
    order: Vec<&'static str>,
}

impl ViolationSet {
    pub(crate) fn add(&mut self, invariant: &'static str, offender: impl Into<String>) {
        if !self.by_name.contains_key(invariant) {
            self.order.push(invariant);
        }
        self.by_name
            .entry(invariant)
            .or_default()
            .push(offender.into());
    }

    pub(crate) fn into_vec(mut self) -> Vec<Violation> {
        self.order
            .iter()
            .map(|name| {
                let offenders = self.by_name.remove(name).unwrap_or_default();
                Violation::new(*name, offenders.join(", "))
            })
            .collect()
    }
}

pub const CYCLE: &str = "cycle";
pub const UNREACHABLE: &str = "unreachable";

/// Checks every `TrainingApp` invariant. An empty result means the app is valid.
pub fn validate_app(app: &TrainingApp) -> Vec<Violation> {
    let mut v = ViolationSet::default();

    if app.operators.is_empty() {
        v.add("non_empty", "app declares no operators");
    }

    let mut seen = BTreeSet::new();
    for op in &app.operators {
        if !seen.insert(op.id.as_str()) {
            v.add("unique_ids", op.id.clone());
        }
        if op.parallelism_min < 1 {
            v.add("parallelism_min >= 1", op.id.clone());
        }
        if op.parallelism_min > op.parallelism_max {
            v.add("parallelism_min <= parallelism_max", op.id.clone());
        }
        if !(op.selectivity >= 0.0) || !op.selectivity.is_finite() {
            v.add("selectivity >= 0", op.id.clone());
        }
        if !(op.cost_per_tuple > 0.0) || !op.cost_per_tuple.is_finite() {
            v.add("cost_per_tuple > 0", op.id.clone());
        }
        if !(op.state_size >= 0.0) || !op.state_size.is_finite() {
            v.add("state_size >= 0", op.id.clone());
        }
    }

    let mut endpoints_ok = true;
    for (from, to) in &app.edges {
        for end in [from, to] {
            if !seen.contains(end.as_str()) {
                v.add("edge_endpoints", format!("{from} -> {to}"));
                endpoints_ok = false;
                break;
            }
        }
    }

    if endpoints_ok && !app.operators.is_empty() {
        let succ = app.successor_map();
        if kahn_leftover(&succ).is_some() {
            v.add(CYCLE, "graph contains a directed cycle");
        }
        let sources = app.sources();
        let sinks = app.sinks();
        if sources.is_empty() {
            v.add("has_source", "no operator with in-degree 0");
        }
        if sinks.is_empty() {
            v.add("has_sink", "no operator with out-degree 0");
        }
        let mut reached: BTreeSet<&str> = BTreeSet::new();
        let mut stack: Vec<&str> = sources.clone();
        while let Some(id) = stack.pop() {
            if reached.insert(id) {
                stack.extend(succ.get(id).into_iter().flatten().copied());
            }
        }
        for op in &app.operators {
            if !reached.contains(op.id.as_str()) {
                v.add(UNREACHABLE, op.id.clone());
            }
        }
    }

    v.into_vec()
}

/// Kahn's algorithm with a lexicographic ready set. Returns `None` for the
/// order when a cycle leaves operators unprocessed.
fn kahn(succ: &BTreeMap<&str, BTreeSet<&str>>) -> (Vec<String>, bool) {
    let mut indeg: BTreeMap<&str, usize> = succ.keys().map(|k| (*k, 0)).collect();
    for targets in succ.values() {
        for t in targets {
            *indeg.get_mut(t).expect("edge endpoint") += 1;
        }
    }
    let mut ready: BTreeSet<&str> = indeg
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(k, _)| *k)
        .collect();
    let mut order = Vec::with_capacity(succ.len());
    while let Some(id) = ready.pop_first() {
        order.push(id.to_string());
        for t in &succ[id] {
            let d = indeg.get_mut(t).expect("edge endpoint");
            *d -= 1;
            if *d == 0 {
                ready.insert(t);
            }
        }
    }
    let complete = order.len() == succ.len();
    (order, complete)
}

fn kahn_leftover(succ: &BTreeMap<&str, BTreeSet<&str>>) -> Option<usize> {
    let (order, complete) = kahn(succ);
    (!complete).then(|| succ.len() - order.len())
}

/// Deterministic topological order; ready operators are taken smallest id first.
pub fn topo_order(app: &TrainingApp) -> Result<Vec<String>, Vec<Violation>> {
    let violations = validate_app(app);
    if !violations.is_empty() {
        return Err(violations);
    }
    let (order, complete) = kahn(&app.successor_map());
    debug_assert!(complete);
    Ok(order)
}

mod edge_list {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(edges: &[(String, String)], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(edges.iter().map(|(a, b)| format!("{a} -> {b}")))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(String, String)>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.into_iter()
            .map(|e| match e.split_once("->") {
                Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() => {
                    Ok((a.trim().to_string(), b.trim().to_string()))
                }
                _ => Err(D::Error::custom(format!(
                    "edge `{e}` is not of the form `from -> to`"
                ))),
            })
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn op(id: &str, kind: OperatorKind) -> OperatorSpec {
        OperatorSpec {
            id: id.to_string(),
            kind,
            sensitivity: None,
            selectivity: 1.0,
            cost_per_tuple: 0.001,
            parallelism_min: 1,
            parallelism_max: 4,
            state_size: 1.0,
        }
    }

    pub fn app(ops: Vec<OperatorSpec>, edges: &[(&str, &str)]) -> TrainingApp {
        TrainingApp {
            model_class: ModelClass::Mlp,
            edges: edges
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            operators: ops,
        }
    }

    /// Chain A -> B -> C -> D with A sensitive.
    pub fn chain_abcd() -> TrainingApp {
        let mut a = op("A", OperatorKind::Source);
        a.sensitivity = Some("vehicle".into());
        a.parallelism_min = 2;
        let b = op("B", OperatorKind::Transform);
        let c = op("C", OperatorKind::Trainer);
        let d = op("D", OperatorKind::Sink);
        app(vec![a, b, c, d], &[("A", "B"), ("B", "C"), ("C", "D")])
    }
}
