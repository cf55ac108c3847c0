//! Deterministic discrete-event simulation of a training application.
//!
//! Tuples arrive once per simulated second and flow through the operator DAG
//! in topological order within that second. Each instance processes work at
//! its node's device speedup divided by the number of instances sharing the
//! node. Trainer instances additionally advance the epoch counter at the
//! same shared rate, summed over instances. Failures evict instances, which
//! are re-placed and stay unavailable while their state migrates. All
//! randomness comes from one generator seeded by the scenario.

mod metrics;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{
    export_metrics, fmt_f64, timeseries_header, EventRow, ExportError, MetricsReport, OpAccount,
    OpRow, Summary, TimeRow, EVENTS_CSV, SUMMARY_CSV, TIMESERIES_CSV,
};

use crate::app_model::{topo_order, ArrivalMode, OperatorKind, Scenario, ScenarioError};
use crate::autoscaler::{self, MetricsSample, OpSample, ScaleDecision, ScaleReason};
use crate::cluster_model::{accuracy_after, apply_failure, Cluster, Tier, TrainingProfile};
use crate::placer::{self, migration_cost, rebalance, InstanceId, Placement, PlacementError};

/// Piecewise-constant input rate in tuples/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorkloadTrace {
    pub breakpoints: Vec<(f64, f64)>,
}

impl WorkloadTrace {
    pub fn constant(rate: f64) -> Self {
        WorkloadTrace {
            breakpoints: vec![(0.0, rate)],
        }
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        self.breakpoints
            .iter()
            .take_while(|(start, _)| *start <= t)
            .last()
            .map_or(0.0, |(_, r)| *r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimEventKind {
    Failure { node_id: String },
    InstanceReady { instance: InstanceId },
    TupleBatch,
    EpochComplete { generation: u64 },
    TrainingComplete,
    ReplicationDone,
    AutoscaleTick,
}

impl SimEventKind {
    /// Order among events sharing a timestamp.
    fn priority(&self) -> u8 {
        match self {
            SimEventKind::Failure { .. } => 0,
            SimEventKind::InstanceReady { .. } => 1,
            SimEventKind::TupleBatch => 2,
            SimEventKind::EpochComplete { .. } => 3,
            SimEventKind::TrainingComplete => 4,
            SimEventKind::ReplicationDone => 5,
            SimEventKind::AutoscaleTick => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub time: f64,
    pub kind: SimEventKind,
}

struct Queued {
    event: SimEvent,
    seq: u64,
}

impl Queued {
    fn key(&self) -> (f64, u8, u64) {
        (self.event.time, self.event.kind.priority(), self.seq)
    }
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // Reversed so the max-heap pops the earliest key.
    fn cmp(&self, other: &Self) -> Ordering {
        let (ta, pa, sa) = self.key();
        let (tb, pb, sb) = other.key();
        tb.total_cmp(&ta).then(pb.cmp(&pa)).then(sb.cmp(&sa))
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(#[from] ScenarioError),
    #[error("event at {event} precedes clock {clock}")]
    TimeRegression { clock: f64, event: f64 },
}

#[derive(Debug, Clone, Default)]
struct InstanceState {
    queue: u64,
    /// Unused fractional tuple capacity carried to the next batch.
    carry: f64,
    ready_at: f64,
}

#[derive(Debug, Clone, Default)]
struct OpState {
    account: OpAccount,
    rr_cursor: u32,
    /// Tuples entering the operator during the current batch.
    arrivals: u64,
}

/// A running simulation. Drive it with [`Simulation::run`], or event by
/// event with [`Simulation::pop_event`] and [`Simulation::step`].
pub struct Simulation {
    scenario: Scenario,
    order: Vec<String>,
    sources: Vec<String>,
    training: TrainingProfile,
    clock: f64,
    seq: u64,
    queue: BinaryHeap<Queued>,
    rng: ChaCha8Rng,
    inject_carry: f64,

    cluster: Cluster,
    placement: Placement,
    instances: BTreeMap<InstanceId, InstanceState>,
    ops: BTreeMap<String, OpState>,

    epochs: u32,
    epoch_fraction: f64,
    epoch_rate: f64,
    progress_at: f64,
    generation: u64,
    training_done_at: Option<f64>,
    target_reached: bool,

    last_decision: Option<f64>,
    history: VecDeque<(f64, MetricsSample)>,

    report: MetricsReport,
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        scenario.check()?;
        let order = topo_order(&scenario.app)
            .map_err(|v| SimError::InvalidScenario(ScenarioError::Invalid(v)))?;
        let sources = scenario
            .app
            .sources()
            .into_iter()
            .map(String::from)
            .collect();
        let training = scenario.training.profile(scenario.app.model_class);
        let mut sim = Simulation {
            order: order.clone(),
            sources,
            training,
            clock: 0.0,
            seq: 0,
            queue: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            inject_carry: 0.0,
            cluster: scenario.cluster.clone(),
            placement: Placement::default(),
            instances: BTreeMap::new(),
            ops: scenario
                .app
                .operators
                .iter()
                .map(|o| (o.id.clone(), OpState::default()))
                .collect(),
            epochs: 0,
            epoch_fraction: 0.0,
            epoch_rate: 0.0,
            progress_at: 0.0,
            generation: 0,
            training_done_at: None,
            target_reached: false,
            last_decision: None,
            history: VecDeque::new(),
            report: MetricsReport {
                operators: order,
                edges: scenario.app.edges.clone(),
                summary: Summary {
                    seed: scenario.seed,
                    horizon: scenario.horizon,
                    ..Summary::default()
                },
                ..MetricsReport::default()
            },
            scenario: scenario.clone(),
        };
        match placer::place(&sim.scenario.app, &sim.cluster) {
            Ok(p) => {
                for inst in p.assignment.keys() {
                    sim.instances.insert(inst.clone(), InstanceState::default());
                }
                sim.placement = p;
                sim.snapshot();
                sim.reschedule_epoch();
                sim.push(SimEvent {
                    time: 0.0,
                    kind: SimEventKind::TupleBatch,
                });
                for f in sim.scenario.failures.events.clone() {
                    sim.push(SimEvent {
                        time: f.time,
                        kind: SimEventKind::Failure { node_id: f.node_id },
                    });
                }
            }
            Err(e) => sim.abort(0.0, &e.to_string()),
        }
        Ok(sim)
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn placement(&self) -> &Placement {
        &self.placement
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn is_aborted(&self) -> bool {
        self.report.summary.aborted
    }

    /// Tuples queued at an instance, if it exists.
    pub fn backlog_of(&self, inst: &InstanceId) -> Option<u64> {
        self.instances.get(inst).map(|s| s.queue)
    }

    /// Time until which an instance is migrating.
    pub fn ready_at(&self, inst: &InstanceId) -> Option<f64> {
        self.instances.get(inst).map(|s| s.ready_at)
    }

    pub fn report(&self) -> &MetricsReport {
        &self.report
    }

    fn push(&mut self, event: SimEvent) {
        self.seq += 1;
        self.queue.push(Queued {
            event,
            seq: self.seq,
        });
    }

    pub fn pop_event(&mut self) -> Option<SimEvent> {
        self.queue.pop().map(|q| q.event)
    }

    /// Processes one event, enqueues and returns the events it emits.
    pub fn step(&mut self, event: SimEvent) -> Result<Vec<SimEvent>, SimError> {
        if event.time < self.clock {
            return Err(SimError::TimeRegression {
                clock: self.clock,
                event: event.time,
            });
        }
        self.clock = event.time;
        let now = event.time;
        let mut emitted = Vec::new();
        if self.is_aborted() && !matches!(event.kind, SimEventKind::ReplicationDone) {
            return Ok(emitted);
        }
        match event.kind {
            SimEventKind::TupleBatch => {
                self.tuple_batch(now);
                emitted.push(SimEvent {
                    time: now,
                    kind: SimEventKind::AutoscaleTick,
                });
                if now + 1.0 < self.scenario.horizon {
                    emitted.push(SimEvent {
                        time: now + 1.0,
                        kind: SimEventKind::TupleBatch,
                    });
                }
            }
            SimEventKind::Failure { node_id } => self.failure(now, &node_id),
            SimEventKind::InstanceReady { .. } => {
                self.advance_training(now);
                self.reschedule_epoch();
            }
            SimEventKind::EpochComplete { generation } => {
                if generation == self.generation && self.training_done_at.is_none() {
                    self.advance_training(now);
                    self.epochs += 1;
                    self.epoch_fraction = 0.0;
                    let acc = accuracy_after(&self.training, self.epochs);
                    self.report
                        .accuracy_trajectory
                        .push((now, self.epochs, acc));
                    self.event(now, "epoch", &self.epochs.to_string(), &fmt_f64(acc));
                    if acc >= self.scenario.training.target_accuracy {
                        self.target_reached = true;
                        emitted.push(SimEvent {
                            time: now,
                            kind: SimEventKind::TrainingComplete,
                        });
                    } else {
                        self.reschedule_epoch();
                    }
                }
            }
            SimEventKind::TrainingComplete => {
                if self.training_done_at.is_none() {
                    self.complete_training(now);
                    emitted.push(SimEvent {
                        time: now + self.scenario.sim.replication_delay,
                        kind: SimEventKind::ReplicationDone,
                    });
                }
            }
            SimEventKind::ReplicationDone => self.replicate(now),
            SimEventKind::AutoscaleTick => self.autoscale(now),
        }
        for e in &emitted {
            self.push(e.clone());
        }
        Ok(emitted)
    }

    /// Runs to the horizon and returns the report.
    pub fn run(mut self) -> MetricsReport {
        let horizon = self.scenario.horizon;
        while let Some(ev) = self.pop_event() {
            if ev.time >= horizon && !matches!(ev.kind, SimEventKind::ReplicationDone) {
                continue;
            }
            self.step(ev).expect("queue pops in time order");
        }
        if self.training_done_at.is_none() && !self.is_aborted() {
            self.clock = horizon;
            self.complete_training(horizon);
            let at = horizon + self.scenario.sim.replication_delay;
            self.step(SimEvent {
                time: at,
                kind: SimEventKind::ReplicationDone,
            })
            .expect("replication follows horizon");
        }
        self.finish()
    }

    fn finish(mut self) -> MetricsReport {
        let mut in_flight = 0;
        let mut dropped = 0;
        for (id, state) in &mut self.ops {
            state.account.queued = self
                .instances
                .iter()
                .filter(|(i, _)| &i.op == id)
                .map(|(_, s)| s.queue)
                .sum();
            in_flight += state.account.queued;
            dropped += state.account.dropped;
            self.report.accounts.insert(id.clone(), state.account);
        }
        let s = &mut self.report.summary;
        s.in_flight = in_flight;
        s.dropped = dropped;
        s.epochs = self.epochs;
        s.final_accuracy = accuracy_after(&self.training, self.epochs);
        s.target_reached = self.target_reached;
        s.training_completion_time = self.training_done_at.unwrap_or(self.scenario.horizon);
        self.report
    }

    fn event(&mut self, time: f64, kind: &str, subject: &str, detail: &str) {
        self.report.events.push(EventRow {
            time,
            kind: kind.to_string(),
            subject: subject.to_string(),
            detail: detail.to_string(),
        });
    }

    fn abort(&mut self, time: f64, reason: &str) {
        self.event(time, "infeasible", "placement", reason);
        self.report.summary.aborted = true;
        self.report.summary.abort_reason = reason.to_string();
        self.queue.clear();
    }

    fn snapshot(&mut self) {
        let t = self.clock;
        for (inst, node) in &self.placement.assignment {
            self.report.events.push(EventRow {
                time: t,
                kind: "placement".into(),
                subject: inst.to_string(),
                detail: node.clone(),
            });
        }
        self.report.placements.push((t, self.placement.clone()));
    }

    fn speed_share(&self, node: &str, load: &BTreeMap<&str, u32>) -> f64 {
        let speed = self
            .cluster
            .speedup(node, self.scenario.app.model_class)
            .unwrap_or(0.0);
        speed / load.get(node).copied().unwrap_or(1).max(1) as f64
    }

    fn advance_training(&mut self, now: f64) {
        if self.training_done_at.is_none() {
            self.epoch_fraction += self.epoch_rate * (now - self.progress_at);
        }
        self.progress_at = now;
    }

    /// Recomputes the epoch rate from ready trainer instances and schedules
    /// the next epoch boundary. Must follow `advance_training`.
    fn reschedule_epoch(&mut self) {
        self.generation += 1;
        if self.training_done_at.is_some() {
            return;
        }
        let load = self.placement.load();
        let now = self.clock;
        let mut rate = 0.0;
        for (inst, node) in &self.placement.assignment {
            let is_trainer = self
                .scenario
                .app
                .operator(&inst.op)
                .is_some_and(|o| o.kind == OperatorKind::Trainer);
            if is_trainer && self.instances.get(inst).is_some_and(|s| s.ready_at <= now) {
                rate += self.speed_share(node, &load) / self.training.base_epoch_time;
            }
        }
        self.epoch_rate = rate;
        if rate > 0.0 {
            let wait = ((1.0 - self.epoch_fraction) / rate).max(0.0);
            let generation = self.generation;
            self.push(SimEvent {
                time: now + wait,
                kind: SimEventKind::EpochComplete { generation },
            });
        }
    }

    fn complete_training(&mut self, now: f64) {
        self.advance_training(now);
        self.training_done_at = Some(now);
        self.generation += 1;
        let acc = accuracy_after(&self.training, self.epochs);
        self.event(
            now,
            "training_complete",
            if self.target_reached {
                "target"
            } else {
                "horizon"
            },
            &fmt_f64(acc),
        );
    }

    fn replicate(&mut self, now: f64) {
        let alive: Vec<String> = self
            .cluster
            .nodes
            .iter()
            .filter(|n| n.alive)
            .map(|n| n.id.clone())
            .collect();
        for n in &self.cluster.nodes {
            self.report
                .model_versions
                .insert(n.id.clone(), if n.alive { 1 } else { 0 });
        }
        if let Some(done) = self.training_done_at {
            self.report.summary.replication_time = now - done;
        }
        self.report.summary.replicated_nodes = alive.len();
        self.event(
            now,
            "replication_done",
            &alive.len().to_string(),
            &alive.join(" "),
        );
    }

    fn arrivals(&mut self, rate: f64, dt: f64) -> u64 {
        let mean = rate * dt;
        if mean <= 0.0 {
            return 0;
        }
        match self.scenario.sim.arrivals {
            ArrivalMode::Poisson => {
                let d = Poisson::new(mean).expect("positive finite mean");
                let x: f64 = d.sample(&mut self.rng);
                x as u64
            }
            ArrivalMode::Deterministic => {
                self.inject_carry += mean;
                let n = self.inject_carry.floor();
                self.inject_carry -= n;
                n as u64
            }
        }
    }

    fn tuple_batch(&mut self, now: f64) {
        let dt = (self.scenario.horizon - now).min(1.0);
        let rate = self.scenario.trace.rate_at(now);
        let injected = self.arrivals(rate, dt);
        self.report.summary.injected += injected;

        for st in self.ops.values_mut() {
            st.arrivals = 0;
        }
        let k = self.sources.len() as u64;
        for (i, s) in self.sources.iter().enumerate() {
            let share = injected / k + u64::from((i as u64) < injected % k);
            self.ops.get_mut(s).expect("source op").arrivals = share;
        }

        let load = self.placement.load();
        let cap = self.scenario.sim.queue_cap;
        let mut sample = MetricsSample::new();
        let mut op_rows = Vec::with_capacity(self.order.len());
        let mut source_processed = 0;
        for id in self.order.clone() {
            let spec = self
                .scenario
                .app
                .operator(&id)
                .expect("ordered op exists")
                .clone();
            let replicas: Vec<InstanceId> = self
                .placement
                .instances_of(&id)
                .map(|(i, _)| i.clone())
                .collect();
            let arrivals = self.ops[&id].arrivals;

            // Admission and round-robin distribution.
            let queued_now: u64 = replicas.iter().map(|i| self.instances[i].queue).sum();
            let accepted = match cap {
                Some(c) => arrivals.min(c.saturating_sub(queued_now)),
                None => arrivals,
            };
            let n = replicas.len() as u64;
            {
                let st = self.ops.get_mut(&id).expect("op state");
                st.account.received += arrivals;
                st.account.dropped += arrivals - accepted;
                let base = accepted / n;
                let extra = accepted % n;
                let cursor = st.rr_cursor as u64 % n;
                for (idx, inst) in replicas.iter().enumerate() {
                    let offset = (idx as u64 + n - cursor) % n;
                    let got = base + u64::from(offset < extra);
                    self.instances.get_mut(inst).expect("instance state").queue += got;
                }
                st.rr_cursor = ((cursor + extra) % n) as u32;
            }

            // Processing.
            let mut processed = 0;
            let mut capacity = 0.0;
            for inst in &replicas {
                let node = &self.placement.assignment[inst];
                let share = self.speed_share(node, &load);
                let state = self.instances.get_mut(inst).expect("instance state");
                if state.ready_at > now {
                    state.carry = 0.0;
                    continue;
                }
                capacity += share;
                let avail = state.carry + share * dt / spec.cost_per_tuple;
                let whole = avail.floor();
                let done = state.queue.min(whole as u64);
                state.carry = if done as f64 == whole {
                    avail - whole
                } else {
                    0.0
                };
                state.queue -= done;
                processed += done;
            }
            let st = self.ops.get_mut(&id).expect("op state");
            st.account.processed += processed;
            let total_out = (st.account.processed as f64 * spec.selectivity).floor() as u64;
            let out = total_out.saturating_sub(st.account.emitted);
            st.account.emitted += out;
            for (from, to) in &self.scenario.app.edges {
                if from == &id {
                    self.ops.get_mut(to).expect("edge target").arrivals += out;
                }
            }
            if self.sources.contains(&id) {
                source_processed += processed;
            }

            let backlog: u64 = replicas.iter().map(|i| self.instances[i].queue).sum();
            let demand = arrivals as f64 * spec.cost_per_tuple / dt;
            sample.insert(
                id.clone(),
                OpSample {
                    demand,
                    capacity,
                    backlog: backlog as f64 * spec.cost_per_tuple,
                },
            );
            let utilization = if demand <= 0.0 {
                0.0
            } else if capacity <= 0.0 {
                f64::MAX
            } else {
                demand / capacity
            };
            op_rows.push(OpRow {
                backlog,
                parallelism: replicas.len() as u32,
                utilization,
            });
        }

        self.history.push_back((now, sample));
        while self
            .history
            .front()
            .is_some_and(|(t, _)| *t <= now - self.scenario.policy.window)
        {
            self.history.pop_front();
        }

        // Include progress made during this second so the row is current.
        let epochs = self.epochs;
        self.report.rows.push(TimeRow {
            time: now as u64,
            input_rate: rate,
            injected,
            processed_rate: source_processed as f64 / dt,
            alive_node_count: self.cluster.alive_count(),
            active_node_count: self.cluster.active_count(),
            epochs,
            accuracy: accuracy_after(&self.training, epochs),
            ops: op_rows,
        });
    }

    fn failure(&mut self, now: f64, node_id: &str) {
        self.advance_training(now);
        match apply_failure(&self.cluster, &self.placement, node_id, now) {
            Ok((cluster, evicted)) => {
                self.cluster = cluster;
                let names: Vec<String> = evicted.iter().map(|i| i.to_string()).collect();
                self.event(now, "failure", node_id, &names.join(" "));
                if !evicted.is_empty() {
                    self.recover(now, evicted);
                }
            }
            Err(e) => self.event(now, "warning", node_id, &e.to_string()),
        }
        if !self.is_aborted() {
            self.reschedule_epoch();
        }
    }

    /// Re-places evicted instances. When they do not fit, idle nodes are
    /// activated first, then surplus replicas above the minimum parallelism
    /// are dropped. If that still fails the run aborts.
    fn recover(&mut self, now: f64, mut evicted: Vec<InstanceId>) {
        let before = self.placement.clone();
        let app = self.scenario.app.clone();
        let mut activated = Vec::new();
        let mut dropped = Vec::new();
        let mut result = rebalance(&self.placement, &app, &self.cluster, &evicted);

        while result.is_err() && self.cluster.active_count() < self.cluster.pool_max as usize {
            let wanted: BTreeSet<Option<&str>> = evicted
                .iter()
                .filter_map(|i| app.operator(&i.op))
                .map(|o| o.sensitivity.as_deref().filter(|d| !d.is_empty()))
                .collect();
            let candidate = self
                .cluster
                .nodes
                .iter()
                .filter(|n| n.alive && !n.active)
                .min_by_key(|n| {
                    let useful = wanted.iter().any(|w| match w {
                        Some(d) => n.tier == Tier::Edge && n.hosted_datasets.contains(*d),
                        None => true,
                    });
                    (!useful, n.id.clone())
                })
                .map(|n| n.id.clone());
            let Some(id) = candidate else { break };
            self.cluster.node_mut(&id).expect("candidate exists").active = true;
            activated.push(id);
            result = rebalance(&self.placement, &app, &self.cluster, &evicted);
        }

        if let Err(PlacementError::Infeasible { .. }) = result {
            let mut by_op: BTreeMap<String, Vec<u32>> = BTreeMap::new();
            for i in &evicted {
                by_op.entry(i.op.clone()).or_default().push(i.replica);
            }
            for (op, mut replicas) in by_op {
                let spec = app.operator(&op).expect("evicted op exists");
                let p = self.placement.parallelism[&op];
                let surplus = p.saturating_sub(spec.parallelism_min) as usize;
                replicas.sort_unstable_by(|a, b| b.cmp(a));
                let gone: BTreeSet<u32> = replicas.into_iter().take(surplus).collect();
                if gone.is_empty() {
                    continue;
                }
                let renamed = self.drop_replicas(&op, &gone);
                dropped.extend(gone.iter().map(|r| InstanceId::new(&op, *r)));
                evicted = evicted
                    .into_iter()
                    .filter(|i| !(i.op == op && gone.contains(&i.replica)))
                    .map(|i| {
                        if i.op == op {
                            renamed.get(&i).cloned().unwrap_or(i)
                        } else {
                            i
                        }
                    })
                    .collect();
            }
            result = rebalance(&self.placement, &app, &self.cluster, &evicted);
        }

        if !activated.is_empty() || !dropped.is_empty() {
            let mut deltas: BTreeMap<String, i32> = BTreeMap::new();
            for d in &dropped {
                *deltas.entry(d.op.clone()).or_insert(0) -= 1;
            }
            let decision = ScaleDecision {
                op_parallelism_delta: deltas,
                node_delta: activated.len() as i32,
                reason: ScaleReason::FailureCompensation,
            };
            self.event(
                now,
                "decision",
                &decision.reason.to_string(),
                &decision.to_string(),
            );
            self.report.summary.scale_decisions += 1;
        }

        match result {
            Ok(next) => {
                let moved: Vec<InstanceId> = next
                    .assignment
                    .iter()
                    .filter(|(i, n)| before.assignment.get(*i).is_some_and(|old| old != *n))
                    .map(|(i, _)| i.clone())
                    .collect();
                self.report.summary.migration_cost += migration_cost(&self.placement, &next, &app);
                self.placement = next;
                for inst in moved {
                    self.begin_migration(now, &inst);
                    self.report.summary.total_migrations += 1;
                }
                // Renumbered replicas changed identity but not location.
                self.snapshot();
            }
            Err(e) => {
                // Dead nodes cannot keep instances; drop them from the snapshot.
                self.placement
                    .assignment
                    .retain(|_, n| self.cluster.node(n).is_some_and(|n| n.alive));
                self.snapshot();
                self.abort(now, &e.to_string());
            }
        }
    }

    fn begin_migration(&mut self, now: f64, inst: &InstanceId) {
        let state_size = self
            .scenario
            .app
            .operator(&inst.op)
            .map_or(0.0, |o| o.state_size);
        let delay = state_size * self.scenario.sim.migration_time_per_state;
        let st = self.instances.entry(inst.clone()).or_default();
        st.ready_at = now + delay;
        st.carry = 0.0;
        if delay > 0.0 {
            self.push(SimEvent {
                time: now + delay,
                kind: SimEventKind::InstanceReady {
                    instance: inst.clone(),
                },
            });
        }
    }

    /// Removes replicas of `op`, renumbering survivors to 0..p-1 in order and
    /// folding removed queues into replica 0. Returns old -> new ids for
    /// survivors whose index changed.
    fn drop_replicas(
        &mut self,
        op: &str,
        gone: &BTreeSet<u32>,
    ) -> BTreeMap<InstanceId, InstanceId> {
        let p = self.placement.parallelism[op];
        let mut orphaned = 0;
        let mut survivors = Vec::new();
        for r in 0..p {
            let id = InstanceId::new(op, r);
            let node = self.placement.assignment.remove(&id);
            let state = self.instances.remove(&id).unwrap_or_default();
            if gone.contains(&r) {
                orphaned += state.queue;
            } else {
                survivors.push((id, node, state));
            }
        }
        let mut renamed = BTreeMap::new();
        for (new_r, (old, node, state)) in survivors.into_iter().enumerate() {
            let new = InstanceId::new(op, new_r as u32);
            if let Some(n) = node {
                self.placement.assignment.insert(new.clone(), n);
            }
            self.instances.insert(new.clone(), state);
            if old != new {
                renamed.insert(old, new);
            }
        }
        let keep = p - gone.len() as u32;
        self.placement.parallelism.insert(op.to_string(), keep);
        self.instances
            .get_mut(&InstanceId::new(op, 0))
            .expect("at least one replica")
            .queue += orphaned;
        renamed
    }

    fn autoscale(&mut self, now: f64) {
        let policy = self.scenario.policy.clone();
        if self
            .last_decision
            .is_some_and(|t| now - t < policy.cooldown)
        {
            return;
        }
        let since = self.last_decision.unwrap_or(f64::NEG_INFINITY);
        let window: Vec<MetricsSample> = self
            .history
            .iter()
            .filter(|(t, _)| *t > since)
            .map(|(_, s)| s.clone())
            .collect();
        let Ok(stats) = autoscaler::observe(&window) else {
            return;
        };
        let decision = autoscaler::decide(
            &stats,
            &policy,
            &self.placement,
            &self.scenario.app,
            &self.cluster,
        );
        if decision.is_none() {
            return;
        }
        self.last_decision = Some(now);
        self.report.summary.scale_decisions += 1;
        self.event(
            now,
            "decision",
            &decision.reason.to_string(),
            &decision.to_string(),
        );
        match autoscaler::apply_decision(
            &decision,
            &self.scenario.app,
            &self.cluster,
            &self.placement,
        ) {
            Ok(out) => {
                self.advance_training(now);
                for (inst, _) in &out.removed {
                    let state = self.instances.remove(inst).unwrap_or_default();
                    if let Some(first) = self.instances.get_mut(&InstanceId::new(&inst.op, 0)) {
                        first.queue += state.queue;
                    }
                }
                self.report.summary.migration_cost +=
                    migration_cost(&self.placement, &out.placement, &self.scenario.app);
                self.cluster = out.cluster;
                self.placement = out.placement;
                for inst in &out.added {
                    self.begin_migration(now, inst);
                }
                for w in out.warnings {
                    self.event(now, "warning", "autoscaler", &w);
                }
                for n in out.activated {
                    self.event(now, "activate", &n, "");
                }
                for n in out.released {
                    self.event(now, "release", &n, "");
                }
                self.snapshot();
                self.reschedule_epoch();
            }
            Err(e) => {
                self.report.summary.rolled_back_decisions += 1;
                self.event(
                    now,
                    "rollback",
                    &decision.reason.to_string(),
                    &e.to_string(),
                );
            }
        }
    }
}

/// Runs a scenario to its horizon. An infeasible initial placement yields a
/// report flagged as aborted rather than an error.
pub fn simulate(scenario: &Scenario) -> Result<MetricsReport, SimError> {
    Ok(Simulation::new(scenario)?.run())
}
