//! The local resource management system: a FIFO job queue and slot-based
//! dispatch onto registered workers.
//!
//! Jobs are dispatched strictly in submission order; each job lands on the
//! lowest-ordered eligible worker with a free slot. A worker freshly
//! registered after powering on is *cold*: its first job pays a one-time
//! setup delay before processing starts.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::domain::NodeId;

/// One job-to-slot assignment produced by a dispatch round.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    pub job_id: u32,
    pub node_id: NodeId,
    /// Extra setup seconds charged before processing (cold worker only).
    pub setup_s: f64,
}

#[derive(Debug)]
struct LrmsNode {
    node_id: NodeId,
    slots: u32,
    running: Vec<u32>,
    cold: bool,
}

/// FIFO queue plus the registered worker set.
#[derive(Debug)]
pub struct Lrms {
    pending: VecDeque<u32>,
    /// Workers keyed by dispatch order (creation order of the node pool).
    nodes: BTreeMap<usize, LrmsNode>,
    setup_duration: f64,
}

impl Lrms {
    pub fn new(setup_duration: f64) -> Self {
        Self { pending: VecDeque::new(), nodes: BTreeMap::new(), setup_duration }
    }

    /// Queues a job at the back.
    pub fn submit(&mut self, job_id: u32) {
        self.pending.push_back(job_id);
    }

    /// Returns a job to the front of the queue (it was submitted earliest).
    pub fn resubmit_front(&mut self, job_id: u32) {
        self.pending.push_front(job_id);
    }

    /// Adds a worker to the dispatch pool; it starts cold.
    pub fn register(&mut self, order: usize, node_id: NodeId, slots: u32) {
        self.nodes
            .insert(order, LrmsNode { node_id, slots, running: Vec::new(), cold: true });
    }

    /// Removes a worker, returning whatever jobs it was still running.
    pub fn deregister(&mut self, node_id: &NodeId) -> Vec<u32> {
        let order = self
            .nodes
            .iter()
            .find(|(_, n)| &n.node_id == node_id)
            .map(|(o, _)| *o);
        match order {
            Some(o) => self.nodes.remove(&o).map(|n| n.running).unwrap_or_default(),
            None => Vec::new(),
        }
    }

    pub fn is_registered(&self, node_id: &NodeId) -> bool {
        self.nodes.values().any(|n| &n.node_id == node_id)
    }

    /// Assigns queued jobs to eligible workers: earliest job first, lowest
    /// dispatch order first.
    pub fn dispatch(&mut self, eligible: &BTreeSet<NodeId>) -> Vec<Dispatch> {
        let mut out = Vec::new();
        'jobs: while let Some(&job_id) = self.pending.front() {
            for node in self.nodes.values_mut() {
                if !eligible.contains(&node.node_id) {
                    continue;
                }
                if (node.running.len() as u32) < node.slots {
                    node.running.push(job_id);
                    let setup_s = if node.cold {
                        node.cold = false;
                        self.setup_duration
                    } else {
                        0.0
                    };
                    out.push(Dispatch {
                        job_id,
                        node_id: node.node_id.clone(),
                        setup_s,
                    });
                    self.pending.pop_front();
                    continue 'jobs;
                }
            }
            break;
        }
        out
    }

    /// Records a job completion; returns false when the job was not running
    /// there (a stale completion).
    pub fn complete(&mut self, node_id: &NodeId, job_id: u32) -> bool {
        for node in self.nodes.values_mut() {
            if &node.node_id == node_id {
                if let Some(pos) = node.running.iter().position(|j| *j == job_id) {
                    node.running.remove(pos);
                    return true;
                }
                return false;
            }
        }
        false
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn running_count(&self) -> usize {
        self.nodes.values().map(|n| n.running.len()).sum()
    }

    /// Free slots on one registered worker.
    pub fn free_slots_of(&self, node_id: &NodeId) -> u32 {
        self.nodes
            .values()
            .find(|n| &n.node_id == node_id)
            .map(|n| n.slots.saturating_sub(n.running.len() as u32))
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eligible(ids: &[&str]) -> BTreeSet<NodeId> {
        ids.iter().map(|s| NodeId::from(*s)).collect()
    }

    #[test]
    fn cold_worker_pays_setup_only_on_its_first_job() {
        let mut lrms = Lrms::new(270.0);
        lrms.register(0, "wn-1".into(), 1);
        lrms.submit(1);
        lrms.submit(2);

        let first = lrms.dispatch(&eligible(&["wn-1"]));
        assert_eq!(first.len(), 1);
        assert_eq!(first[0].setup_s, 270.0);

        lrms.complete(&"wn-1".into(), 1);
        let second = lrms.dispatch(&eligible(&["wn-1"]));
        assert_eq!(second[0].setup_s, 0.0);
    }

    #[test]
    fn dispatch_prefers_the_lowest_ordered_worker() {
        let mut lrms = Lrms::new(0.0);
        lrms.register(2, "wn-3".into(), 1);
        lrms.register(0, "wn-1".into(), 1);
        lrms.register(1, "wn-2".into(), 1);
        for id in 1..=3 {
            lrms.submit(id);
        }
        let out = lrms.dispatch(&eligible(&["wn-1", "wn-2", "wn-3"]));
        let order: Vec<&str> = out.iter().map(|d| d.node_id.as_str()).collect();
        assert_eq!(order, vec!["wn-1", "wn-2", "wn-3"]);
        assert_eq!(out[0].job_id, 1);
    }

    #[test]
    fn multi_slot_workers_fill_before_the_next_one() {
        let mut lrms = Lrms::new(0.0);
        lrms.register(0, "wn-1".into(), 2);
        lrms.register(1, "wn-2".into(), 2);
        for id in 1..=3 {
            lrms.submit(id);
        }
        let out = lrms.dispatch(&eligible(&["wn-1", "wn-2"]));
        let order: Vec<&str> = out.iter().map(|d| d.node_id.as_str()).collect();
        assert_eq!(order, vec!["wn-1", "wn-1", "wn-2"]);
    }

    #[test]
    fn no_eligible_capacity_leaves_the_queue_untouched() {
        let mut lrms = Lrms::new(0.0);
        lrms.register(0, "wn-1".into(), 1);
        lrms.submit(1);
        lrms.submit(2);
        let first = lrms.dispatch(&eligible(&["wn-1"]));
        assert_eq!(first.len(), 1);
        // Slot busy and wn-2 not eligible: nothing moves.
        lrms.register(1, "wn-2".into(), 1);
        let second = lrms.dispatch(&eligible(&["wn-1"]));
        assert!(second.is_empty());
        assert_eq!(lrms.pending_count(), 1);
    }

    #[test]
    fn deregistration_returns_running_jobs_for_resubmission() {
        let mut lrms = Lrms::new(0.0);
        lrms.register(0, "wn-1".into(), 1);
        lrms.submit(7);
        lrms.dispatch(&eligible(&["wn-1"]));
        assert_eq!(lrms.running_count(), 1);

        let orphans = lrms.deregister(&"wn-1".into());
        assert_eq!(orphans, vec![7]);
        assert!(!lrms.is_registered(&"wn-1".into()));

        lrms.resubmit_front(7);
        assert_eq!(lrms.pending_count(), 1);
    }

    #[test]
    fn reregistration_makes_a_worker_cold_again() {
        let mut lrms = Lrms::new(100.0);
        lrms.register(0, "wn-1".into(), 1);
        lrms.submit(1);
        assert_eq!(lrms.dispatch(&eligible(&["wn-1"]))[0].setup_s, 100.0);
        lrms.complete(&"wn-1".into(), 1);
        lrms.deregister(&"wn-1".into());

        lrms.register(0, "wn-1".into(), 1);
        lrms.submit(2);
        assert_eq!(lrms.dispatch(&eligible(&["wn-1"]))[0].setup_s, 100.0);
    }
}
