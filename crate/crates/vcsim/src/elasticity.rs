//! Queue-driven elasticity: when to power workers on, when to schedule them
//! for power-off, when to cancel a scheduled power-off, and how to react to
//! a node that stops responding.
//!
//! The policy is deliberately conservative: at most one power-on per
//! evaluation, power-offs only once the queue is fully drained, and a grace
//! period between scheduling a power-off and starting it so that freshly
//! arrived work can reclaim the node instead of paying a full
//! deprovision/provision round trip.

use crate::domain::{NodeId, NodeState, SiteKind};

/// What the policy knows about one worker when it runs.
#[derive(Debug, Clone)]
pub struct WorkerView {
    pub node_id: NodeId,
    /// Site the worker is currently bound to; unbound while off.
    pub site_kind: Option<SiteKind>,
    pub state: NodeState,
    /// When the node last became idle, if it is idle or scheduled for
    /// power-off.
    pub idle_since: Option<f64>,
    /// Job slots not currently occupied.
    pub free_slots: u32,
}

/// Cluster snapshot handed to the policy at each evaluation.
#[derive(Debug)]
pub struct ClusterView<'a> {
    pub now: f64,
    pub workers: &'a [WorkerView],
    pub pending_jobs: u32,
    pub idle_timeout: f64,
    pub poweroff_grace: f64,
    pub max_workers: u32,
    /// Whether the provisioning pipeline can accept a new update now.
    pub provisioning_free: bool,
}

/// What the policy wants done. Actions are emitted in application order.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// Provision this (currently off) worker.
    PowerOn { node_id: NodeId },
    /// Mark this worker for power-off once `grace` seconds pass without the
    /// queue claiming it back.
    SchedulePoweroff { node_id: NodeId, grace: f64 },
    /// Return a scheduled-for-power-off worker to idle service.
    CancelPoweroff { node_id: NodeId },
    /// Declare this worker failed.
    MarkFailed { node_id: NodeId },
}

/// An elasticity policy maps cluster snapshots to actions.
pub trait ElasticityPolicy {
    fn evaluate(&self, view: &ClusterView<'_>) -> Vec<Action>;

    /// Reaction to a resource-manager liveness report about one worker.
    fn on_probe(&self, worker: &WorkerView, responsive: bool) -> Vec<Action>;
}

/// The default queue-driven policy described above.
#[derive(Debug, Default)]
pub struct QueueDrivenPolicy;

impl QueueDrivenPolicy {
    /// Slots that pending jobs could still land on without provisioning:
    /// spare capacity on live nodes plus capacity already on its way up.
    fn free_slots(view: &ClusterView<'_>) -> u32 {
        view.workers
            .iter()
            .filter(|w| {
                matches!(
                    w.state,
                    NodeState::Idle | NodeState::Used | NodeState::PoweringOn
                )
            })
            .map(|w| w.free_slots)
            .sum()
    }

    /// Workers currently part of the cluster (anything not powered off).
    fn active_workers(view: &ClusterView<'_>) -> u32 {
        view.workers
            .iter()
            .filter(|w| w.state != NodeState::Off)
            .count() as u32
    }
}

/// Removal preference: public-site nodes first (they cost money), then the
/// longest-idle, then the highest node id. Returns indices into `workers`.
pub fn victim_order(workers: &[WorkerView]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..workers.len()).collect();
    order.sort_by(|&a, &b| {
        let (wa, wb) = (&workers[a], &workers[b]);
        let public_a = wa.site_kind == Some(SiteKind::Public);
        let public_b = wb.site_kind == Some(SiteKind::Public);
        public_b
            .cmp(&public_a)
            .then_with(|| {
                let ia = wa.idle_since.unwrap_or(f64::INFINITY);
                let ib = wb.idle_since.unwrap_or(f64::INFINITY);
                ia.total_cmp(&ib)
            })
            .then_with(|| wb.node_id.cmp(&wa.node_id))
    });
    order
}

impl ElasticityPolicy for QueueDrivenPolicy {
    fn evaluate(&self, view: &ClusterView<'_>) -> Vec<Action> {
        let mut actions = Vec::new();
        let free = Self::free_slots(view);

        if view.pending_jobs > 0 {
            // Reclaim scheduled-for-power-off workers before provisioning
            // anything new: cancelling is free, powering on is not.
            let scheduled: Vec<usize> = view
                .workers
                .iter()
                .enumerate()
                .filter(|(_, w)| w.state == NodeState::PoweroffScheduled)
                .map(|(i, _)| i)
                .collect();
            let deficit = view.pending_jobs.saturating_sub(free) as usize;
            let mut cancel_count = scheduled.len().min(deficit);
            let mut reclaimed_slots = 0u32;
            if cancel_count > 0 {
                // Cancel in reverse removal preference: keep the workers we
                // would have shut down last.
                let preference = victim_order(view.workers);
                for &idx in preference.iter().rev() {
                    if cancel_count == 0 {
                        break;
                    }
                    if view.workers[idx].state == NodeState::PoweroffScheduled {
                        actions.push(Action::CancelPoweroff {
                            node_id: view.workers[idx].node_id.clone(),
                        });
                        reclaimed_slots += view.workers[idx].free_slots;
                        cancel_count -= 1;
                    }
                }
            }

            // Conservative scale-up: one power-on per evaluation, and only
            // when the queue still overflows the capacity that is live,
            // arriving, or just reclaimed.
            let capacity = free + reclaimed_slots;
            if view.pending_jobs > capacity
                && Self::active_workers(view) < view.max_workers
                && view.provisioning_free
            {
                if let Some(target) = view
                    .workers
                    .iter()
                    .find(|w| w.state == NodeState::Off)
                {
                    actions.push(Action::PowerOn { node_id: target.node_id.clone() });
                }
            }
        } else {
            // Queue drained: schedule every sufficiently idle worker, in
            // removal-preference order.
            for idx in victim_order(view.workers) {
                let w = &view.workers[idx];
                if w.state != NodeState::Idle {
                    continue;
                }
                let idle_for = w
                    .idle_since
                    .map(|s| view.now - s)
                    .unwrap_or(0.0);
                if idle_for >= view.idle_timeout {
                    actions.push(Action::SchedulePoweroff {
                        node_id: w.node_id.clone(),
                        grace: view.poweroff_grace,
                    });
                }
            }
        }
        actions
    }

    fn on_probe(&self, worker: &WorkerView, responsive: bool) -> Vec<Action> {
        if responsive {
            return Vec::new();
        }
        match worker.state {
            // The cluster believed this node was alive: declare it failed
            // and queue an immediate teardown.
            NodeState::Used | NodeState::Idle | NodeState::PoweringOn => vec![
                Action::MarkFailed { node_id: worker.node_id.clone() },
                Action::SchedulePoweroff { node_id: worker.node_id.clone(), grace: 0.0 },
            ],
            // Scheduled for power-off, already failed, leaving, or off: the
            // node is on its way out regardless.
            NodeState::PoweroffScheduled
            | NodeState::Failed
            | NodeState::PoweringOff
            | NodeState::Off => Vec::new(),
        }
    }
}
