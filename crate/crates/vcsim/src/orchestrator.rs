//! Cluster reconfiguration workflow: site ranking, update operations and
//! their serialization.
//!
//! Every structural change to the cluster — the initial deployment, adding a
//! worker, removing a worker — is an *update operation* that walks through
//! provisioning phases of fixed duration. Unless parallel provisioning is
//! enabled, at most one update may be in flight: further requests are
//! rejected with [`OrchestratorError::Busy`] and must be retried once the
//! current update completes. That serialization is deliberate; it reproduces
//! the ramp-up and ramp-down staircases characteristic of real deployments.

use std::collections::BTreeMap;

use crate::domain::{CloudSite, NodeId, Sla, SiteId};

/// Why an update request was not accepted or a lookup failed.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OrchestratorError {
    #[error("an update operation is already in flight (op {op_id})")]
    Busy { op_id: u64 },
    #[error("site `{site}` has no free instance quota")]
    QuotaExceeded { site: SiteId },
    #[error("no site can accept another worker")]
    NoEligibleSite,
    #[error("unknown update operation {op_id}")]
    UnknownOp { op_id: u64 },
    #[error("unknown site `{site}`")]
    UnknownSite { site: SiteId },
}

/// What an update operation does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    InitialDeploy,
    AddNode,
    RemoveNode,
}

impl UpdateKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            UpdateKind::InitialDeploy => "initial_deploy",
            UpdateKind::AddNode => "add_node",
            UpdateKind::RemoveNode => "remove_node",
        }
    }
}

/// A provisioning phase an update walks through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseName {
    NetworkCreate,
    VmCreate,
    TunnelSetup,
    Contextualize,
    Deprovision,
}

impl PhaseName {
    pub fn as_str(&self) -> &'static str {
        match self {
            PhaseName::NetworkCreate => "network_create",
            PhaseName::VmCreate => "vm_create",
            PhaseName::TunnelSetup => "tunnel_setup",
            PhaseName::Contextualize => "contextualize",
            PhaseName::Deprovision => "deprovision",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub name: PhaseName,
    pub duration: f64,
}

/// One in-flight (or completed) reconfiguration of the cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOperation {
    pub op_id: u64,
    pub kind: UpdateKind,
    pub site_id: SiteId,
    /// Nodes this update brings up or tears down. A worker that is the
    /// first at its site shares the update with the site's router.
    pub nodes: Vec<NodeId>,
    pub phases: Vec<Phase>,
    pub started_at: f64,
    pub finishes_at: f64,
}

impl UpdateOperation {
    /// Completion time of each phase, in order.
    pub fn phase_boundaries(&self) -> Vec<(PhaseName, f64)> {
        let mut t = self.started_at;
        self.phases
            .iter()
            .map(|p| {
                t += p.duration;
                (p.name, t)
            })
            .collect()
    }

    pub fn duration(&self) -> f64 {
        self.phases.iter().map(|p| p.duration).sum()
    }
}

/// A request for the orchestrator to change the cluster.
#[derive(Debug, Clone, PartialEq)]
pub enum UpdateRequest {
    /// Bring up the front-end and the initial workers in one batch.
    InitialDeploy { site_id: SiteId, nodes: Vec<NodeId>, slowest_site: SiteId },
    /// Bring up one worker at a site; `with_vrouter` folds the site router
    /// into the same update when the site joins the overlay.
    AddNode { site_id: SiteId, node_id: NodeId, with_vrouter: Option<NodeId> },
    /// Tear down one worker; `with_vrouter` folds the site router's removal
    /// in when the last worker leaves the site.
    RemoveNode { site_id: SiteId, node_id: NodeId, with_vrouter: Option<NodeId> },
}

/// Serializes update operations and assigns them phase plans.
#[derive(Debug)]
pub struct Orchestrator {
    next_op_id: u64,
    in_flight: Vec<UpdateOperation>,
    parallel_provisioning: bool,
}

impl Orchestrator {
    pub fn new(parallel_provisioning: bool) -> Self {
        Self { next_op_id: 1, in_flight: Vec::new(), parallel_provisioning }
    }

    pub fn is_busy(&self) -> bool {
        !self.parallel_provisioning && !self.in_flight.is_empty()
    }

    pub fn in_flight(&self) -> &[UpdateOperation] {
        &self.in_flight
    }

    /// Accepts a request, computes its phase plan from the target site's
    /// declared durations, and returns the new in-flight operation.
    pub fn begin(
        &mut self,
        request: UpdateRequest,
        sites: &[CloudSite],
        now: f64,
    ) -> Result<&UpdateOperation, OrchestratorError> {
        if let Some(current) = self.in_flight.first() {
            if !self.parallel_provisioning {
                return Err(OrchestratorError::Busy { op_id: current.op_id });
            }
        }
        let site_of = |id: &SiteId| {
            sites
                .iter()
                .find(|s| &s.site_id == id)
                .ok_or_else(|| OrchestratorError::UnknownSite { site: id.clone() })
        };

        let (kind, site_id, nodes, phases) = match request {
            UpdateRequest::InitialDeploy { site_id, nodes, slowest_site } => {
                let site = site_of(&slowest_site)?;
                (UpdateKind::InitialDeploy, site_id, nodes, provision_phases(site))
            }
            UpdateRequest::AddNode { site_id, node_id, with_vrouter } => {
                let site = site_of(&site_id)?;
                let mut nodes = Vec::new();
                if let Some(vr) = with_vrouter {
                    nodes.push(vr);
                }
                nodes.push(node_id);
                (UpdateKind::AddNode, site_id, nodes, provision_phases(site))
            }
            UpdateRequest::RemoveNode { site_id, node_id, with_vrouter } => {
                let site = site_of(&site_id)?;
                let mut nodes = vec![node_id];
                if let Some(vr) = with_vrouter {
                    nodes.push(vr);
                }
                let phases = vec![Phase {
                    name: PhaseName::Deprovision,
                    duration: site.deprovision_duration,
                }];
                (UpdateKind::RemoveNode, site_id, nodes, phases)
            }
        };

        let started_at = now;
        let finishes_at = now + phases.iter().map(|p| p.duration).sum::<f64>();
        let op = UpdateOperation {
            op_id: self.next_op_id,
            kind,
            site_id,
            nodes,
            phases,
            started_at,
            finishes_at,
        };
        self.next_op_id += 1;
        self.in_flight.push(op);
        Ok(self.in_flight.last().expect("just pushed"))
    }

    /// Marks an in-flight operation finished and returns it.
    pub fn complete(&mut self, op_id: u64) -> Result<UpdateOperation, OrchestratorError> {
        let idx = self
            .in_flight
            .iter()
            .position(|op| op.op_id == op_id)
            .ok_or(OrchestratorError::UnknownOp { op_id })?;
        Ok(self.in_flight.remove(idx))
    }
}

/// The full provisioning phase plan for a site.
fn provision_phases(site: &CloudSite) -> Vec<Phase> {
    let d = &site.provisioning_phase_durations;
    vec![
        Phase { name: PhaseName::NetworkCreate, duration: d.network_create },
        Phase { name: PhaseName::VmCreate, duration: d.vm_create },
        Phase { name: PhaseName::TunnelSetup, duration: d.tunnel_setup },
        Phase { name: PhaseName::Contextualize, duration: d.contextualize },
    ]
}

/// Sites ordered by desirability for the next worker: higher
/// `availability / sla_priority` first, full sites excluded, ties broken by
/// site id. `used_quota` counts every instance a site currently hosts,
/// including routers and in-flight provisioning.
pub fn rank_sites(
    sites: &[CloudSite],
    slas: &[Sla],
    used_quota: &BTreeMap<SiteId, u32>,
) -> Vec<SiteId> {
    let mut scored: Vec<(f64, &SiteId)> = sites
        .iter()
        .filter_map(|site| {
            let used = used_quota.get(&site.site_id).copied().unwrap_or(0);
            if used >= site.max_instances {
                return None;
            }
            let priority = slas
                .iter()
                .find(|s| s.site_id == site.site_id)
                .map(|s| s.priority)
                .unwrap_or(u32::MAX);
            Some((site.availability / f64::from(priority), &site.site_id))
        })
        .collect();
    scored.sort_by(|(score_a, id_a), (score_b, id_b)| {
        score_b
            .total_cmp(score_a)
            .then_with(|| id_a.cmp(id_b))
    });
    scored.into_iter().map(|(_, id)| id.clone()).collect()
}

/// The site the next worker should go to, or `NoEligibleSite` when every
/// site is at quota.
pub fn select_site_for_worker(
    sites: &[CloudSite],
    slas: &[Sla],
    used_quota: &BTreeMap<SiteId, u32>,
) -> Result<SiteId, OrchestratorError> {
    rank_sites(sites, slas, used_quota)
        .into_iter()
        .next()
        .ok_or(OrchestratorError::NoEligibleSite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CostRate, PhaseDurations, SiteKind};

    fn mk_site(id: &str, max_instances: u32, availability: f64) -> CloudSite {
        CloudSite {
            site_id: id.into(),
            kind: SiteKind::Public,
            max_instances,
            max_public_ips: 2,
            supports_private_networks: true,
            provisioning_phase_durations: PhaseDurations {
                network_create: 60.0,
                vm_create: 240.0,
                tunnel_setup: 120.0,
                contextualize: 780.0,
            },
            deprovision_duration: 400.0,
            billing: CostRate::free(),
            vrouter_billing: None,
            availability,
        }
    }

    fn slas() -> Vec<Sla> {
        vec![
            Sla { site_id: "onprem".into(), priority: 1 },
            Sla { site_id: "aws".into(), priority: 2 },
        ]
    }

    #[test]
    fn ranks_by_availability_over_priority_with_lexicographic_ties() {
        let sites = vec![mk_site("aws", 8, 0.99), mk_site("onprem", 3, 1.0)];
        let ranked = rank_sites(&sites, &slas(), &BTreeMap::new());
        // onprem: 1.0/1 = 1.0 beats aws: 0.99/2 = 0.495.
        assert_eq!(ranked, vec![SiteId::from("onprem"), SiteId::from("aws")]);

        // Equal scores fall back to site-id order.
        let twins = vec![mk_site("beta", 4, 0.8), mk_site("alpha", 4, 0.8)];
        let equal_slas = vec![
            Sla { site_id: "alpha".into(), priority: 2 },
            Sla { site_id: "beta".into(), priority: 2 },
        ];
        let ranked = rank_sites(&twins, &equal_slas, &BTreeMap::new());
        assert_eq!(ranked, vec![SiteId::from("alpha"), SiteId::from("beta")]);
    }

    #[test]
    fn full_sites_are_excluded_and_skipped() {
        let sites = vec![mk_site("aws", 8, 0.99), mk_site("onprem", 3, 1.0)];
        let mut used = BTreeMap::new();
        used.insert(SiteId::from("onprem"), 3);
        let ranked = rank_sites(&sites, &slas(), &used);
        assert_eq!(ranked, vec![SiteId::from("aws")]);
        assert_eq!(
            select_site_for_worker(&sites, &slas(), &used).unwrap(),
            SiteId::from("aws")
        );

        used.insert(SiteId::from("aws"), 8);
        assert_eq!(
            select_site_for_worker(&sites, &slas(), &used).unwrap_err(),
            OrchestratorError::NoEligibleSite
        );
    }

    #[test]
    fn rejects_a_second_update_while_one_is_in_flight() {
        let sites = vec![mk_site("aws", 8, 0.99)];
        let mut orch = Orchestrator::new(false);
        let first = orch
            .begin(
                UpdateRequest::AddNode {
                    site_id: "aws".into(),
                    node_id: "wn-3".into(),
                    with_vrouter: Some("vrouter-aws".into()),
                },
                &sites,
                540.0,
            )
            .unwrap();
        let first_id = first.op_id;
        assert_eq!(first.finishes_at, 540.0 + 1200.0);
        assert_eq!(first.nodes, vec![NodeId::from("vrouter-aws"), NodeId::from("wn-3")]);

        let err = orch
            .begin(
                UpdateRequest::AddNode {
                    site_id: "aws".into(),
                    node_id: "wn-4".into(),
                    with_vrouter: None,
                },
                &sites,
                600.0,
            )
            .unwrap_err();
        assert_eq!(err, OrchestratorError::Busy { op_id: first_id });

        orch.complete(first_id).unwrap();
        assert!(!orch.is_busy());
    }

    #[test]
    fn sequential_adds_form_an_even_staircase() {
        let sites = vec![mk_site("aws", 8, 0.99)];
        let mut orch = Orchestrator::new(false);
        let mut now = 540.0;
        let mut completions = Vec::new();
        for (i, node) in ["wn-3", "wn-4", "wn-5"].iter().enumerate() {
            let op = orch
                .begin(
                    UpdateRequest::AddNode {
                        site_id: "aws".into(),
                        node_id: (*node).into(),
                        with_vrouter: (i == 0).then(|| "vrouter-aws".into()),
                    },
                    &sites,
                    now,
                )
                .unwrap();
            let (id, done) = (op.op_id, op.finishes_at);
            completions.push(done);
            orch.complete(id).unwrap();
            now = done;
        }
        assert_eq!(completions, vec![1740.0, 2940.0, 4140.0]);
        // Folding the router into the first add does not stretch it.
        assert_eq!(completions[1] - completions[0], completions[2] - completions[1]);
    }

    #[test]
    fn parallel_provisioning_overlaps_updates() {
        let sites = vec![mk_site("aws", 8, 0.99)];
        let mut orch = Orchestrator::new(true);
        for (node, at) in [("wn-3", 540.0), ("wn-4", 570.0), ("wn-5", 600.0)] {
            orch.begin(
                UpdateRequest::AddNode {
                    site_id: "aws".into(),
                    node_id: node.into(),
                    with_vrouter: (node == "wn-3").then(|| "vrouter-aws".into()),
                },
                &sites,
                at,
            )
            .unwrap();
        }
        assert_eq!(orch.in_flight().len(), 3);
        let finishes: Vec<f64> = orch.in_flight().iter().map(|o| o.finishes_at).collect();
        assert_eq!(finishes, vec![1740.0, 1770.0, 1800.0]);
    }

    #[test]
    fn removal_is_a_single_deprovision_phase() {
        let sites = vec![mk_site("aws", 8, 0.99)];
        let mut orch = Orchestrator::new(false);
        let op = orch
            .begin(
                UpdateRequest::RemoveNode {
                    site_id: "aws".into(),
                    node_id: "wn-5".into(),
                    with_vrouter: None,
                },
                &sites,
                6000.0,
            )
            .unwrap();
        assert_eq!(op.phases.len(), 1);
        assert_eq!(op.phases[0].name, PhaseName::Deprovision);
        assert_eq!(op.finishes_at, 6400.0);
        let boundaries = op.phase_boundaries();
        assert_eq!(boundaries, vec![(PhaseName::Deprovision, 6400.0)]);
    }

    #[test]
    fn phase_boundaries_accumulate_in_declared_order() {
        let sites = vec![mk_site("aws", 8, 0.99)];
        let mut orch = Orchestrator::new(false);
        let op = orch
            .begin(
                UpdateRequest::AddNode {
                    site_id: "aws".into(),
                    node_id: "wn-3".into(),
                    with_vrouter: None,
                },
                &sites,
                0.0,
            )
            .unwrap();
        let boundaries = op.phase_boundaries();
        assert_eq!(
            boundaries,
            vec![
                (PhaseName::NetworkCreate, 60.0),
                (PhaseName::VmCreate, 300.0),
                (PhaseName::TunnelSetup, 420.0),
                (PhaseName::Contextualize, 1200.0),
            ]
        );
        assert_eq!(op.duration(), 1200.0);
    }
}
