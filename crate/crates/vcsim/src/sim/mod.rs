//! The deterministic discrete-event simulation engine.
//!
//! Events are ordered by `(time, insertion sequence)`, so simultaneous
//! events resolve in the order they were scheduled and a run is a pure
//! function of `(scenario, seed)`: re-running produces byte-identical
//! output. The engine owns the node pool, drives the resource manager, the
//! elasticity policy and the provisioning workflow, and records every state
//! change for the event log and the timeline.
//!
//! A run ends when the cluster goes *quiescent*: no queued or running jobs,
//! no update in flight, no workload or fault yet to arrive, and every node
//! except the front-end powered off.

pub mod lrms;
pub mod metrics;
pub mod rng;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::Serialize;

use crate::domain::{
    validate_scenario, DomainError, Job, JobState, NodeId, NodeRole, NodeState, Scenario,
    SiteId,
};
use crate::elasticity::{Action, ClusterView, ElasticityPolicy, QueueDrivenPolicy, WorkerView};
use crate::orchestrator::{
    rank_sites, Orchestrator, OrchestratorError, UpdateKind, UpdateOperation, UpdateRequest,
};
use crate::overlay::{
    build_overlay, trace_path, NodePlacement, OverlayError, TopologyReport,
};
use crate::sim::lrms::Lrms;
use crate::sim::metrics::{
    render_timeline_csv, summarize, MetricsCollector, StateInterval, Summary,
};
use crate::sim::rng::RandomStream;

/// Simulation failures.
#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Overlay(#[from] OverlayError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error("simulated time exceeded max_sim_time ({limit}s); the cluster never went quiescent")]
    MaxSimTimeExceeded { limit: f64 },
    #[error("internal engine error: illegal transition {from} -> {to} on `{node}` at t={t}")]
    IllegalTransition { node: NodeId, from: NodeState, to: NodeState, t: f64 },
}

/// One line of the event log.
#[derive(Debug, Clone, Serialize)]
pub struct LogRecord {
    pub t: f64,
    pub seq: u64,
    pub kind: &'static str,
    pub node: Option<String>,
    pub detail: String,
}

/// Everything a run produces.
#[derive(Debug)]
pub struct RunOutputs {
    pub events: Vec<LogRecord>,
    pub intervals: Vec<StateInterval>,
    pub summary: Summary,
    pub topology: TopologyReport,
}

impl RunOutputs {
    /// The event log as JSON Lines, one record per line, stable key order.
    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.events {
            out.push_str(&serde_json::to_string(record).expect("log record serializes"));
            out.push('\n');
        }
        out
    }

    /// The node state timeline as CSV.
    pub fn timeline_csv(&self) -> String {
        render_timeline_csv(&self.intervals)
    }
}

/// Side-by-side figures for two runs; deltas are `variant - baseline`.
#[derive(Debug, Serialize)]
pub struct CompareReport {
    pub baseline: Summary,
    pub variant: Summary,
    pub makespan_delta_s: f64,
    pub busy_delta_s: f64,
    pub cost_delta: f64,
}

impl CompareReport {
    pub fn new(baseline: Summary, variant: Summary) -> Self {
        let makespan_delta_s = variant.makespan_s - baseline.makespan_s;
        let busy_delta_s = variant.busy_s - baseline.busy_s;
        let cost_delta = variant.total_cost() - baseline.total_cost();
        Self { baseline, variant, makespan_delta_s, busy_delta_s, cost_delta }
    }
}

/// Runs two scenarios under the same optional seed override and reports the
/// differences.
pub fn compare_scenarios(
    baseline: &Scenario,
    variant: &Scenario,
    seed_override: Option<u64>,
) -> Result<CompareReport, SimError> {
    let a = run_scenario(baseline, seed_override)?;
    let b = run_scenario(variant, seed_override)?;
    Ok(CompareReport::new(a.summary, b.summary))
}

/// Plans the overlay for a scenario's initial deployment without running
/// the simulation: the front-end plus the declared initial workers.
pub fn plan_initial_topology(scenario: &Scenario) -> Result<TopologyReport, SimError> {
    validate_scenario(scenario)?;
    let mut placement = vec![NodePlacement {
        node_id: NodeId::from("fe"),
        site_id: scenario.template.front_end_site.clone(),
        role: NodeRole::FrontEnd,
    }];
    let mut next = 1u32;
    for group in &scenario.template.initial_workers {
        for _ in 0..group.count {
            placement.push(NodePlacement {
                node_id: NodeId::new(format!("wn-{next}")),
                site_id: group.site_id.clone(),
                role: NodeRole::Worker,
            });
            next += 1;
        }
    }
    let (topo, routes) = build_overlay(
        &scenario.sites,
        &placement,
        &scenario.template.front_end_site,
        &scenario.overlay.backup_central_point_sites,
        scenario.overlay.base_prefix,
        scenario.overlay.cipher.clone(),
        &scenario.overlay.manual_subnets,
    )?;
    Ok(TopologyReport::new(&topo, &routes))
}

/// Validates and runs a scenario to quiescence.
pub fn run_scenario(
    scenario: &Scenario,
    seed_override: Option<u64>,
) -> Result<RunOutputs, SimError> {
    validate_scenario(scenario)?;
    let seed = seed_override.unwrap_or(scenario.seed);
    let mut engine = Engine::new(scenario, seed)?;
    engine.run()?;
    engine.into_outputs()
}

#[derive(Debug)]
enum EventKind {
    BlockArrival { block_index: usize },
    JobDone { job_id: u32, node: NodeId },
    UpdateDone { op_id: u64 },
    PhaseDone { op_id: u64, phase: &'static str },
    PolicyTick,
    GraceElapsed { node: NodeId, deadline: f64 },
    FaultInject { fault_index: usize },
    FaultReport { node: NodeId },
}

#[derive(Debug)]
struct QueuedEvent {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for QueuedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for QueuedEvent {}
impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time
            .total_cmp(&other.time)
            .then_with(|| self.seq.cmp(&other.seq))
    }
}

#[derive(Debug)]
struct SimNode {
    id: NodeId,
    role: NodeRole,
    /// Dispatch order for workers; meaningless for other roles.
    order: usize,
    state: NodeState,
    state_since: f64,
    /// Current (or last) site binding; `None` for a worker never placed.
    site: Option<SiteId>,
    slots: u32,
    /// Set by fault injection: the machine is gone but the cluster has not
    /// noticed yet.
    dead: bool,
}

#[derive(Debug)]
struct SimJob {
    spec: Job,
    transfer_payload_s: f64,
}

struct Engine<'a> {
    scenario: &'a Scenario,
    now: f64,
    heap: BinaryHeap<Reverse<QueuedEvent>>,
    push_seq: u64,
    log: Vec<LogRecord>,
    log_seq: u64,
    last_activity: f64,
    orch: Orchestrator,
    policy: QueueDrivenPolicy,
    lrms: Lrms,
    nodes: BTreeMap<NodeId, SimNode>,
    worker_order: Vec<NodeId>,
    metrics: MetricsCollector,
    jobs: BTreeMap<u32, SimJob>,
    next_job_id: u32,
    durations: RandomStream,
    poweroff_deadline: BTreeMap<NodeId, f64>,
    blocks_remaining: usize,
    faults_remaining: usize,
    fe_id: NodeId,
}

impl<'a> Engine<'a> {
    fn new(scenario: &'a Scenario, seed: u64) -> Result<Self, SimError> {
        let template = &scenario.template;
        let fe_id = NodeId::from("fe");
        let mut engine = Engine {
            scenario,
            now: 0.0,
            heap: BinaryHeap::new(),
            push_seq: 0,
            log: Vec::new(),
            log_seq: 0,
            last_activity: 0.0,
            orch: Orchestrator::new(scenario.engine.parallel_provisioning),
            policy: QueueDrivenPolicy,
            lrms: Lrms::new(scenario.engine.worker_setup_duration),
            nodes: BTreeMap::new(),
            worker_order: Vec::new(),
            metrics: MetricsCollector::new(),
            jobs: BTreeMap::new(),
            next_job_id: 1,
            durations: RandomStream::derive(seed, "job_durations"),
            poweroff_deadline: BTreeMap::new(),
            blocks_remaining: scenario.workload.len(),
            faults_remaining: scenario.faults.len(),
            fe_id: fe_id.clone(),
        };

        // The fixed logical node pool: one front-end and max_workers worker
        // slots named wn-1..wn-N. Worker identities persist across power
        // cycles; only the site binding changes.
        engine.insert_node(fe_id.clone(), NodeRole::FrontEnd, usize::MAX, 0, Some(
            template.front_end_site.clone(),
        ));
        for i in 1..=template.max_workers {
            let id = NodeId::new(format!("wn-{i}"));
            engine.worker_order.push(id.clone());
            engine.insert_node(id, NodeRole::Worker, (i - 1) as usize, template.worker_slots, None);
        }

        // Initial workers take their declared sites, in declaration order.
        let mut next_worker = 0usize;
        for group in &template.initial_workers {
            for _ in 0..group.count {
                let id = engine.worker_order[next_worker].clone();
                engine.nodes.get_mut(&id).expect("worker exists").site =
                    Some(group.site_id.clone());
                next_worker += 1;
            }
        }

        // Workload blocks arrive at cumulative offsets; faults fire at their
        // configured times.
        let mut t = 0.0;
        for (i, block) in scenario.workload.iter().enumerate() {
            t += block.inter_block_gap;
            engine.schedule(t, EventKind::BlockArrival { block_index: i });
        }
        for (i, fault) in scenario.faults.iter().enumerate() {
            engine.schedule(fault.at, EventKind::FaultInject { fault_index: i });
        }
        engine.schedule(scenario.engine.policy_tick, EventKind::PolicyTick);

        engine.start_initial_deployment()?;
        Ok(engine)
    }

    fn insert_node(
        &mut self,
        id: NodeId,
        role: NodeRole,
        order: usize,
        slots: u32,
        site: Option<SiteId>,
    ) {
        self.metrics.transition(&id, None, role, NodeState::Off, self.now);
        self.nodes.insert(
            id.clone(),
            SimNode { id, role, order, state: NodeState::Off, state_since: self.now, site, slots, dead: false },
        );
    }

    fn schedule(&mut self, time: f64, kind: EventKind) {
        self.heap.push(Reverse(QueuedEvent { time, seq: self.push_seq, kind }));
        self.push_seq += 1;
    }

    fn log(&mut self, kind: &'static str, node: Option<&NodeId>, detail: String) {
        self.log.push(LogRecord {
            t: self.now,
            seq: self.log_seq,
            kind,
            node: node.map(|n| n.to_string()),
            detail,
        });
        self.log_seq += 1;
        self.last_activity = self.now;
    }

    fn set_state(&mut self, node_id: &NodeId, to: NodeState) -> Result<(), SimError> {
        let node = self.nodes.get_mut(node_id).expect("node exists");
        let from = node.state;
        if !NodeState::allowed_transition(from, to) {
            return Err(SimError::IllegalTransition {
                node: node_id.clone(),
                from,
                to,
                t: self.now,
            });
        }
        node.state = to;
        node.state_since = self.now;
        let site = if to == NodeState::Off { None } else { node.site.clone() };
        let role = node.role;
        self.metrics.transition(node_id, site, role, to, self.now);
        self.log("node_state", Some(&node_id.clone()), format!("{from} -> {to}"));
        Ok(())
    }

    // ------------------------------------------------------------------
    // Provisioning workflow
    // ------------------------------------------------------------------

    /// The node a single-worker update is about.
    fn op_subject(op: &UpdateOperation) -> Option<NodeId> {
        match op.kind {
            UpdateKind::InitialDeploy => None,
            UpdateKind::AddNode => op.nodes.last().cloned(),
            UpdateKind::RemoveNode => op.nodes.first().cloned(),
        }
    }

    fn schedule_op_events(&mut self, op: &UpdateOperation) {
        for (phase, at) in op.phase_boundaries() {
            self.schedule(at, EventKind::PhaseDone { op_id: op.op_id, phase: phase.as_str() });
        }
        self.schedule(op.finishes_at, EventKind::UpdateDone { op_id: op.op_id });
    }

    fn log_update_started(&mut self, op: &UpdateOperation) {
        let subject = Self::op_subject(op);
        let nodes = op
            .nodes
            .iter()
            .map(|n| n.as_str())
            .collect::<Vec<_>>()
            .join(", ");
        let detail = format!("op {} {} at {} ({nodes})", op.op_id, op.kind.as_str(), op.site_id);
        self.log("update_started", subject.as_ref(), detail);
    }

    fn start_initial_deployment(&mut self) -> Result<(), SimError> {
        let template = &self.scenario.template;
        let fe_site = template.front_end_site.clone();

        let mut nodes = vec![self.fe_id.clone()];
        let mut involved_sites: BTreeSet<SiteId> = BTreeSet::new();
        involved_sites.insert(fe_site.clone());
        for worker in &self.worker_order {
            if let Some(site) = self.nodes[worker].site.clone() {
                nodes.push(worker.clone());
                involved_sites.insert(site);
            }
        }
        // Remote sites with private networks join the overlay through a
        // router brought up in the same batch.
        for site_id in involved_sites.clone() {
            if site_id == fe_site {
                continue;
            }
            let site = self.scenario.site(&site_id).expect("validated");
            if site.supports_private_networks {
                let vr = self.ensure_vrouter_node(&site_id);
                nodes.push(vr);
            }
        }

        // The batch finishes when its slowest site does.
        let slowest_site = self
            .scenario
            .sites
            .iter()
            .filter(|s| involved_sites.contains(&s.site_id))
            .max_by(|a, b| {
                a.provisioning_phase_durations
                    .sum()
                    .total_cmp(&b.provisioning_phase_durations.sum())
            })
            .map(|s| s.site_id.clone())
            .unwrap_or_else(|| fe_site.clone());

        let request = UpdateRequest::InitialDeploy {
            site_id: fe_site,
            nodes: nodes.clone(),
            slowest_site,
        };
        let op = self
            .orch
            .begin(request, &self.scenario.sites, self.now)?
            .clone();
        self.log_update_started(&op);
        for node in &nodes {
            self.set_state(node, NodeState::PoweringOn)?;
        }
        self.schedule_op_events(&op);
        Ok(())
    }

    fn ensure_vrouter_node(&mut self, site_id: &SiteId) -> NodeId {
        let id = NodeId::new(format!("vrouter-{site_id}"));
        if !self.nodes.contains_key(&id) {
            self.insert_node(id.clone(), NodeRole::Vrouter, usize::MAX, 0, Some(site_id.clone()));
        } else {
            self.nodes.get_mut(&id).expect("exists").site = Some(site_id.clone());
        }
        id
    }

    fn vrouter_alive(&self, site_id: &SiteId) -> bool {
        let id = NodeId::new(format!("vrouter-{site_id}"));
        self.nodes
            .get(&id)
            .map(|n| n.state != NodeState::Off)
            .unwrap_or(false)
    }

    /// Instances currently occupying quota at each site (anything not off).
    fn quota_usage(&self) -> BTreeMap<SiteId, u32> {
        let mut used = BTreeMap::new();
        for node in self.nodes.values() {
            if node.state != NodeState::Off {
                if let Some(site) = &node.site {
                    *used.entry(site.clone()).or_insert(0) += 1;
                }
            }
        }
        used
    }

    /// Provisions one off worker at the best eligible site; does nothing
    /// when no site can take it (the policy will retry later).
    fn start_power_on(&mut self, node_id: &NodeId) -> Result<(), SimError> {
        if self.nodes[node_id].state != NodeState::Off {
            return Ok(());
        }
        let used = self.quota_usage();
        let ranked = rank_sites(
            &self.scenario.sites,
            &self.scenario.template.site_preferences,
            &used,
        );
        for site_id in ranked {
            let site = self.scenario.site(&site_id).expect("ranked site exists");
            let needs_vrouter = site_id != self.scenario.template.front_end_site
                && site.supports_private_networks
                && !self.vrouter_alive(&site_id);
            let needed = 1 + u32::from(needs_vrouter);
            if used.get(&site_id).copied().unwrap_or(0) + needed > site.max_instances {
                continue;
            }

            let vrouter = needs_vrouter.then(|| self.ensure_vrouter_node(&site_id));
            let request = UpdateRequest::AddNode {
                site_id: site_id.clone(),
                node_id: node_id.clone(),
                with_vrouter: vrouter.clone(),
            };
            let op = match self.orch.begin(request, &self.scenario.sites, self.now) {
                Ok(op) => op.clone(),
                // Raced an in-flight update; the policy retries later.
                Err(OrchestratorError::Busy { .. }) => return Ok(()),
                Err(e) => return Err(e.into()),
            };
            self.log("policy_action", Some(&node_id.clone()), format!("power_on {node_id} at {site_id}"));
            self.log_update_started(&op);
            self.nodes.get_mut(node_id).expect("exists").site = Some(site_id.clone());
            self.set_state(node_id, NodeState::PoweringOn)?;
            if let Some(vr) = vrouter {
                self.set_state(&vr, NodeState::PoweringOn)?;
            }
            self.schedule_op_events(&op);
            return Ok(());
        }
        Ok(())
    }

    /// Whether removing this worker leaves its site with no other live
    /// worker, taking the site's router down in the same update.
    fn removal_takes_vrouter(&self, node_id: &NodeId, site_id: &SiteId) -> Option<NodeId> {
        if !self.vrouter_alive(site_id) {
            return None;
        }
        let others_alive = self.nodes.values().any(|n| {
            n.role == NodeRole::Worker
                && &n.id != node_id
                && n.state != NodeState::Off
                && n.site.as_ref() == Some(site_id)
        });
        if others_alive {
            return None;
        }
        let vr = NodeId::new(format!("vrouter-{site_id}"));
        // Leave the router alone while an update that involves it runs.
        let vr_busy = self
            .orch
            .in_flight()
            .iter()
            .any(|op| op.nodes.contains(&vr));
        (!vr_busy).then_some(vr)
    }

    /// Starts the teardown of one worker. Returns false if the orchestrator
    /// could not take the update.
    fn start_removal(&mut self, node_id: &NodeId) -> Result<bool, SimError> {
        let site_id = self.nodes[node_id].site.clone().expect("removal target is placed");
        let vrouter = self.removal_takes_vrouter(node_id, &site_id);
        let request = UpdateRequest::RemoveNode {
            site_id: site_id.clone(),
            node_id: node_id.clone(),
            with_vrouter: vrouter.clone(),
        };
        let op = match self.orch.begin(request, &self.scenario.sites, self.now) {
            Ok(op) => op.clone(),
            Err(OrchestratorError::Busy { .. }) => return Ok(false),
            Err(e) => return Err(e.into()),
        };
        self.log_update_started(&op);
        self.poweroff_deadline.remove(node_id);
        self.lrms.deregister(node_id);
        self.set_state(node_id, NodeState::PoweringOff)?;
        if let Some(vr) = vrouter {
            // The router was never scheduled; walk it through the same gate.
            self.set_state(&vr, NodeState::PoweroffScheduled)?;
            self.set_state(&vr, NodeState::PoweringOff)?;
        }
        self.schedule_op_events(&op);
        Ok(true)
    }

    /// Tears down routers left on sites that no longer host any worker
    /// (only reachable under parallel provisioning, where worker removals
    /// can overlap). Returns false when there was nothing to do.
    fn start_orphan_vrouter_teardown(&mut self) -> Result<bool, SimError> {
        let orphan = self.nodes.values().find_map(|n| {
            if n.role != NodeRole::Vrouter || n.state != NodeState::Idle {
                return None;
            }
            let site = n.site.as_ref()?;
            let workers_alive = self.nodes.values().any(|w| {
                w.role == NodeRole::Worker
                    && w.state != NodeState::Off
                    && w.site.as_ref() == Some(site)
            });
            let in_update = self.orch.in_flight().iter().any(|op| op.nodes.contains(&n.id));
            (!workers_alive && !in_update).then(|| (n.id.clone(), site.clone()))
        });
        let Some((vr, site_id)) = orphan else { return Ok(false) };
        let request = UpdateRequest::RemoveNode {
            site_id,
            node_id: vr.clone(),
            with_vrouter: None,
        };
        let op = match self.orch.begin(request, &self.scenario.sites, self.now) {
            Ok(op) => op.clone(),
            Err(OrchestratorError::Busy { .. }) => return Ok(false),
            Err(e) => return Err(e.into()),
        };
        self.log_update_started(&op);
        self.set_state(&vr, NodeState::PoweroffScheduled)?;
        self.set_state(&vr, NodeState::PoweringOff)?;
        self.schedule_op_events(&op);
        Ok(true)
    }

    /// Workers whose power-off deadline has passed and whose removal may
    /// proceed now, most urgent first.
    fn due_removal_candidates(&self) -> Vec<NodeId> {
        let pending = self.lrms.pending_count();
        let mut failed = Vec::new();
        let mut scheduled = Vec::new();
        for (node_id, deadline) in &self.poweroff_deadline {
            if *deadline > self.now {
                continue;
            }
            match self.nodes[node_id].state {
                NodeState::Failed => failed.push(node_id.clone()),
                NodeState::PoweroffScheduled if pending == 0 => {
                    scheduled.push(node_id.clone())
                }
                _ => {}
            }
        }
        // Scheduled nodes leave in removal-preference order.
        let views = self.worker_views();
        scheduled.sort_by_key(|id| {
            crate::elasticity::victim_order(&views)
                .into_iter()
                .position(|i| &views[i].node_id == id)
        });
        failed.extend(scheduled);
        failed
    }

    /// Starts as many due removals as the orchestrator will take, then
    /// cleans up orphaned routers.
    fn sweep_due_removals(&mut self) -> Result<(), SimError> {
        loop {
            if self.orch.is_busy() {
                return Ok(());
            }
            let due = self.due_removal_candidates();
            if let Some(node_id) = due.first() {
                if !self.start_removal(&node_id.clone())? {
                    return Ok(());
                }
                continue;
            }
            if !self.start_orphan_vrouter_teardown()? {
                return Ok(());
            }
        }
    }

    // ------------------------------------------------------------------
    // Elasticity
    // ------------------------------------------------------------------

    fn worker_views(&self) -> Vec<WorkerView> {
        self.worker_order
            .iter()
            .map(|id| {
                let node = &self.nodes[id];
                let site_kind = node
                    .site
                    .as_ref()
                    .filter(|_| node.state != NodeState::Off)
                    .and_then(|s| self.scenario.site(s))
                    .map(|s| s.kind);
                let idle_since = matches!(
                    node.state,
                    NodeState::Idle | NodeState::PoweroffScheduled
                )
                .then_some(node.state_since);
                let free_slots = match node.state {
                    NodeState::Idle | NodeState::PoweroffScheduled | NodeState::PoweringOn => {
                        node.slots
                    }
                    NodeState::Used => self.lrms.free_slots_of(id),
                    _ => 0,
                };
                WorkerView {
                    node_id: id.clone(),
                    site_kind,
                    state: node.state,
                    idle_since,
                    free_slots,
                }
            })
            .collect()
    }

    fn evaluate_policy(&mut self) -> Result<(), SimError> {
        let views = self.worker_views();
        let view = ClusterView {
            now: self.now,
            workers: &views,
            pending_jobs: self.lrms.pending_count() as u32,
            idle_timeout: self.scenario.template.idle_timeout,
            poweroff_grace: self.scenario.template.poweroff_grace,
            max_workers: self.scenario.template.max_workers,
            provisioning_free: !self.orch.is_busy(),
        };
        let actions = self.policy.evaluate(&view);
        let acted = !actions.is_empty();
        for action in actions {
            self.apply_action(action)?;
        }
        if acted {
            self.try_dispatch()?;
        }
        Ok(())
    }

    fn apply_action(&mut self, action: Action) -> Result<(), SimError> {
        match action {
            Action::PowerOn { node_id } => {
                self.start_power_on(&node_id)?;
            }
            Action::SchedulePoweroff { node_id, grace } => {
                let deadline = self.now + grace;
                self.log(
                    "policy_action",
                    Some(&node_id),
                    format!("schedule_poweroff {node_id} (grace {grace}s)"),
                );
                if self.nodes[&node_id].state == NodeState::Idle {
                    self.set_state(&node_id, NodeState::PoweroffScheduled)?;
                }
                self.poweroff_deadline.insert(node_id.clone(), deadline);
                self.schedule(deadline, EventKind::GraceElapsed { node: node_id, deadline });
            }
            Action::CancelPoweroff { node_id } => {
                self.log(
                    "policy_action",
                    Some(&node_id),
                    format!("cancel_poweroff {node_id}"),
                );
                self.poweroff_deadline.remove(&node_id);
                self.set_state(&node_id, NodeState::Idle)?;
            }
            Action::MarkFailed { node_id } => {
                let orphans = self.lrms.deregister(&node_id);
                let detail = if orphans.is_empty() {
                    format!("mark_failed {node_id}")
                } else {
                    let ids =
                        orphans.iter().map(u32::to_string).collect::<Vec<_>>().join(", ");
                    format!("mark_failed {node_id} (requeued job {ids})")
                };
                self.log("policy_action", Some(&node_id), detail);
                self.set_state(&node_id, NodeState::Failed)?;
                for job_id in orphans.into_iter().rev() {
                    let job = self.jobs.get_mut(&job_id).expect("job exists");
                    job.spec.state = JobState::Pending;
                    job.spec.assigned_node = None;
                    self.lrms.resubmit_front(job_id);
                }
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Jobs
    // ------------------------------------------------------------------

    fn try_dispatch(&mut self) -> Result<(), SimError> {
        let eligible: BTreeSet<NodeId> = self
            .nodes
            .values()
            .filter(|n| {
                n.role == NodeRole::Worker
                    && !n.dead
                    && matches!(n.state, NodeState::Idle | NodeState::Used)
            })
            .map(|n| n.id.clone())
            .collect();
        for d in self.lrms.dispatch(&eligible) {
            let (processing, payload) = {
                let job = &self.jobs[&d.job_id];
                (job.spec.processing_duration, job.transfer_payload_s)
            };
            let transfer = self.transfer_overhead(&d.node_id, payload);
            let job = self.jobs.get_mut(&d.job_id).expect("job exists");
            job.spec.state = JobState::Running;
            job.spec.assigned_node = Some(d.node_id.clone());
            let done_at = self.now + d.setup_s + processing + transfer;
            let mut detail =
                format!("job {} starts (run {processing:.3}s", d.job_id);
            if d.setup_s > 0.0 {
                detail.push_str(&format!(", setup {}s", d.setup_s));
            }
            if transfer > 0.0 {
                detail.push_str(&format!(", transfer {transfer:.3}s"));
            }
            detail.push(')');
            self.log("lrms_dispatch", Some(&d.node_id), detail);
            if self.nodes[&d.node_id].state == NodeState::Idle {
                self.set_state(&d.node_id, NodeState::Used)?;
            }
            self.schedule(done_at, EventKind::JobDone { job_id: d.job_id, node: d.node_id });
        }
        Ok(())
    }

    /// Cipher-adjusted input transfer time for a job landing on this worker.
    /// The hop count follows the overlay star: one hop on the front-end's
    /// network or through a stand-alone tunnel, two when a site router
    /// forwards into a remote network.
    fn transfer_overhead(&self, node_id: &NodeId, payload_s: f64) -> f64 {
        if payload_s <= 0.0 {
            return 0.0;
        }
        let node = &self.nodes[node_id];
        let hops = match &node.site {
            Some(site) if *site != self.scenario.template.front_end_site => {
                let remote = self.scenario.site(site).expect("site exists");
                if remote.supports_private_networks {
                    2
                } else {
                    1
                }
            }
            _ => 1,
        };
        crate::overlay::apply_cipher_profile(&self.scenario.overlay.cipher, payload_s, hops)
    }

    // ------------------------------------------------------------------
    // Event handlers
    // ------------------------------------------------------------------

    fn on_block_arrival(&mut self, block_index: usize) -> Result<(), SimError> {
        self.blocks_remaining -= 1;
        let block = &self.scenario.workload[block_index];
        let payload = block.transfer_payload_s.unwrap_or(0.0);
        let (min, max) = (block.duration_distribution.min, block.duration_distribution.max);
        for _ in 0..block.job_count {
            let job_id = self.next_job_id;
            self.next_job_id += 1;
            let processing_duration = self.durations.uniform(min, max);
            self.jobs.insert(
                job_id,
                SimJob {
                    spec: Job {
                        job_id,
                        submit_time: self.now,
                        processing_duration,
                        state: JobState::Pending,
                        assigned_node: None,
                    },
                    transfer_payload_s: payload,
                },
            );
            self.lrms.submit(job_id);
            self.log(
                "job_arrival",
                None,
                format!("job {job_id} queued (block {})", block_index + 1),
            );
        }
        self.try_dispatch()
    }

    fn on_job_done(&mut self, job_id: u32, node_id: NodeId) -> Result<(), SimError> {
        let node = &self.nodes[&node_id];
        // A completion from a dead or failed machine never arrives.
        if node.dead || node.state == NodeState::Failed {
            return Ok(());
        }
        let job = self.jobs.get_mut(&job_id).expect("job exists");
        if job.spec.state != JobState::Running
            || job.spec.assigned_node.as_ref() != Some(&node_id)
        {
            return Ok(());
        }
        job.spec.state = JobState::Done;
        self.lrms.complete(&node_id, job_id);
        self.log("job_done", Some(&node_id), format!("job {job_id} done"));
        self.try_dispatch()?;
        let node = &self.nodes[&node_id];
        if node.state == NodeState::Used && self.lrms.free_slots_of(&node_id) == node.slots {
            self.set_state(&node_id, NodeState::Idle)?;
        }
        Ok(())
    }

    fn on_update_done(&mut self, op_id: u64) -> Result<(), SimError> {
        let op = self.orch.complete(op_id)?;
        let subject = Self::op_subject(&op);
        self.log(
            "update_done",
            subject.as_ref(),
            format!("op {} {} at {} complete", op.op_id, op.kind.as_str(), op.site_id),
        );
        match op.kind {
            UpdateKind::InitialDeploy | UpdateKind::AddNode => {
                for node_id in &op.nodes {
                    // A node that failed while provisioning stays failed.
                    if self.nodes[node_id].state != NodeState::PoweringOn {
                        continue;
                    }
                    self.set_state(node_id, NodeState::Idle)?;
                    let node = &self.nodes[node_id];
                    if node.role == NodeRole::Worker {
                        self.lrms.register(node.order, node_id.clone(), node.slots);
                    }
                }
            }
            UpdateKind::RemoveNode => {
                for node_id in &op.nodes.clone() {
                    self.set_state(node_id, NodeState::Off)?;
                    self.nodes.get_mut(node_id).expect("exists").dead = false;
                }
            }
        }
        self.try_dispatch()?;
        self.evaluate_policy()?;
        self.sweep_due_removals()
    }

    fn on_policy_tick(&mut self) -> Result<(), SimError> {
        if self.quiescent() {
            return Ok(());
        }
        self.evaluate_policy()?;
        self.sweep_due_removals()?;
        let next = self.now + self.scenario.engine.policy_tick;
        self.schedule(next, EventKind::PolicyTick);
        Ok(())
    }

    fn on_grace_elapsed(&mut self, node: NodeId, deadline: f64) -> Result<(), SimError> {
        // Stale timers (cancelled or rescheduled power-offs) are ignored.
        if self.poweroff_deadline.get(&node) != Some(&deadline) {
            return Ok(());
        }
        self.sweep_due_removals()
    }

    fn on_fault_inject(&mut self, fault_index: usize) -> Result<(), SimError> {
        self.faults_remaining -= 1;
        let fault = &self.scenario.faults[fault_index];
        let node_id = fault.node_id.clone();
        let live = self
            .nodes
            .get(&node_id)
            .map(|n| n.state != NodeState::Off && n.state != NodeState::Failed)
            .unwrap_or(false);
        if !live {
            self.log(
                "fault_injection",
                Some(&node_id),
                format!("{node_id} targeted but not running; no effect"),
            );
            return Ok(());
        }
        self.nodes.get_mut(&node_id).expect("exists").dead = true;
        self.log("fault_injection", Some(&node_id), format!("{node_id} stops responding"));
        self.schedule(
            self.now + fault.detection_delay,
            EventKind::FaultReport { node: node_id },
        );
        Ok(())
    }

    fn on_fault_report(&mut self, node_id: NodeId) -> Result<(), SimError> {
        let node = &self.nodes[&node_id];
        let responsive = !node.dead;
        self.log(
            "lrms_report",
            Some(&node_id),
            if responsive {
                format!("{node_id} responsive")
            } else {
                format!("{node_id} unresponsive")
            },
        );
        let views = self.worker_views();
        let Some(view) = views.iter().find(|v| v.node_id == node_id) else {
            return Ok(());
        };
        let actions = self.policy.on_probe(view, responsive);
        for action in actions {
            self.apply_action(action)?;
        }
        Ok(())
    }

    fn on_phase_done(&mut self, op_id: u64, phase: &'static str) {
        let Some(op) = self.orch.in_flight().iter().find(|op| op.op_id == op_id) else {
            return;
        };
        let subject = Self::op_subject(op);
        let detail = format!("op {} {}: {phase} finished", op.op_id, op.kind.as_str());
        self.log("phase_done", subject.as_ref(), detail);
    }

    // ------------------------------------------------------------------
    // Termination
    // ------------------------------------------------------------------

    /// Nothing queued, running, provisioning, or still to arrive, and every
    /// node but the front-end off.
    fn quiescent(&self) -> bool {
        self.blocks_remaining == 0
            && self.faults_remaining == 0
            && self.lrms.pending_count() == 0
            && self.lrms.running_count() == 0
            && self.orch.in_flight().is_empty()
            && self
                .nodes
                .values()
                .all(|n| n.role == NodeRole::FrontEnd || n.state == NodeState::Off)
    }

    fn run(&mut self) -> Result<(), SimError> {
        let limit = self.scenario.engine.max_sim_time;
        while let Some(Reverse(event)) = self.heap.pop() {
            if event.time > limit {
                return Err(SimError::MaxSimTimeExceeded { limit });
            }
            self.now = event.time;
            match event.kind {
                EventKind::BlockArrival { block_index } => self.on_block_arrival(block_index)?,
                EventKind::JobDone { job_id, node } => self.on_job_done(job_id, node)?,
                EventKind::UpdateDone { op_id } => self.on_update_done(op_id)?,
                EventKind::PhaseDone { op_id, phase } => self.on_phase_done(op_id, phase),
                EventKind::PolicyTick => self.on_policy_tick()?,
                EventKind::GraceElapsed { node, deadline } => {
                    self.on_grace_elapsed(node, deadline)?
                }
                EventKind::FaultInject { fault_index } => self.on_fault_inject(fault_index)?,
                EventKind::FaultReport { node } => self.on_fault_report(node)?,
            }
        }
        Ok(())
    }

    fn into_outputs(self) -> Result<RunOutputs, SimError> {
        let makespan = self.last_activity;
        let intervals = self.metrics.finalize(makespan);
        let summary = summarize(&intervals, &self.scenario.sites, makespan);

        // The overlay as the run shaped it: every node that ever held a site
        // binding, at its final binding.
        let mut placement = vec![NodePlacement {
            node_id: self.fe_id.clone(),
            site_id: self.scenario.template.front_end_site.clone(),
            role: NodeRole::FrontEnd,
        }];
        for worker in &self.worker_order {
            if let Some(site) = &self.nodes[worker].site {
                placement.push(NodePlacement {
                    node_id: worker.clone(),
                    site_id: site.clone(),
                    role: NodeRole::Worker,
                });
            }
        }
        let (topo, routes) = build_overlay(
            &self.scenario.sites,
            &placement,
            &self.scenario.template.front_end_site,
            &self.scenario.overlay.backup_central_point_sites,
            self.scenario.overlay.base_prefix,
            self.scenario.overlay.cipher.clone(),
            &self.scenario.overlay.manual_subnets,
        )?;
        // Sanity: every placed node can reach the front-end over the overlay.
        for p in &placement {
            trace_path(&topo, &routes, &p.node_id, &self.fe_id)?;
        }
        let topology = TopologyReport::new(&topo, &routes);

        Ok(RunOutputs { events: self.log, intervals, summary, topology })
    }
}
