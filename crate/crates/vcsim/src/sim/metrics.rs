//! Run accounting: per-node state timelines, billing, and the end-of-run
//! summary.
//!
//! The state timeline is the single source of truth: busy time, paid time
//! and cost are all derived from it after the run finishes. A node is *paid*
//! in every state except `off`; one maximal span of non-off states is a
//! power cycle and is billed as a whole, rounded up to the site's billing
//! granularity.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::domain::{CloudSite, CostRate, NodeId, NodeRole, NodeState, SiteId};

/// One contiguous stretch a node spent in one state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateInterval {
    pub node: NodeId,
    pub site: Option<SiteId>,
    pub role: NodeRole,
    pub state: NodeState,
    pub enter_s: f64,
    pub exit_s: f64,
}

#[derive(Debug, Clone)]
struct OpenState {
    site: Option<SiteId>,
    role: NodeRole,
    state: NodeState,
    since: f64,
}

/// Records state transitions as they happen and closes them into intervals.
#[derive(Debug, Default)]
pub struct MetricsCollector {
    open: BTreeMap<NodeId, OpenState>,
    intervals: Vec<StateInterval>,
}

impl MetricsCollector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Moves a node into a new state at `now`, closing the interval it was
    /// in. Zero-length intervals are elided.
    pub fn transition(
        &mut self,
        node: &NodeId,
        site: Option<SiteId>,
        role: NodeRole,
        state: NodeState,
        now: f64,
    ) {
        if let Some(open) = self.open.get(node) {
            if now > open.since {
                self.intervals.push(StateInterval {
                    node: node.clone(),
                    site: open.site.clone(),
                    role: open.role,
                    state: open.state,
                    enter_s: open.since,
                    exit_s: now,
                });
            }
        }
        self.open
            .insert(node.clone(), OpenState { site, role, state, since: now });
    }

    /// Closes every open interval at the end of the run and returns the full
    /// timeline, ordered by node then time.
    pub fn finalize(mut self, now: f64) -> Vec<StateInterval> {
        let open = std::mem::take(&mut self.open);
        for (node, state) in open {
            if now > state.since {
                self.intervals.push(StateInterval {
                    node,
                    site: state.site,
                    role: state.role,
                    state: state.state,
                    enter_s: state.since,
                    exit_s: now,
                });
            }
        }
        self.intervals
            .sort_by(|a, b| a.node.cmp(&b.node).then(a.enter_s.total_cmp(&b.enter_s)));
        self.intervals
    }
}

/// Cost of keeping an instance up for `interval_s` seconds: the interval is
/// rounded up to the billing granularity, then charged at the hourly rate.
pub fn accrue_cost(interval_s: f64, rate: &CostRate) -> f64 {
    if interval_s <= 0.0 || rate.per_hour <= 0.0 {
        return 0.0;
    }
    let granularity = f64::from(rate.billing_granularity.max(1));
    let billed_s = (interval_s / granularity).ceil() * granularity;
    billed_s * rate.per_hour / 3600.0
}

/// End-of-run figures.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    /// When the cluster went quiescent.
    pub makespan_s: f64,
    /// Total worker seconds spent processing jobs.
    pub busy_s: f64,
    /// Seconds of instance uptime (any non-off state) per site.
    pub paid_s_by_site: BTreeMap<String, f64>,
    /// Billed cost per site, in the site's currency.
    pub cost_by_site: BTreeMap<String, f64>,
    /// Busy fraction of paid worker time at billed sites; absent when no
    /// billed worker time was accrued.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utilization: Option<f64>,
}

impl Summary {
    pub fn total_cost(&self) -> f64 {
        self.cost_by_site.values().sum()
    }
}

/// Derives the run summary from a finalized timeline.
pub fn summarize(intervals: &[StateInterval], sites: &[CloudSite], makespan_s: f64) -> Summary {
    let site_of = |id: &SiteId| sites.iter().find(|s| &s.site_id == id);

    let mut busy_s = 0.0;
    let mut paid_s_by_site: BTreeMap<String, f64> = BTreeMap::new();
    let mut cost_by_site: BTreeMap<String, f64> = BTreeMap::new();
    let mut billed_worker_busy = 0.0;
    let mut billed_worker_paid = 0.0;

    for s in sites {
        paid_s_by_site.insert(s.site_id.to_string(), 0.0);
        cost_by_site.insert(s.site_id.to_string(), 0.0);
    }

    // Group each node's intervals into power cycles (maximal non-off runs).
    // The timeline is ordered by node then time, so one linear scan works.
    let mut cycle: Option<(SiteId, NodeRole, f64, f64)> = None;
    let mut prev_node: Option<&NodeId> = None;
    let close_cycle =
        |cycle: &mut Option<(SiteId, NodeRole, f64, f64)>,
         cost_by_site: &mut BTreeMap<String, f64>,
         paid_s_by_site: &mut BTreeMap<String, f64>,
         billed_worker_paid: &mut f64| {
            if let Some((site_id, role, start, end)) = cycle.take() {
                let span = end - start;
                *paid_s_by_site.entry(site_id.to_string()).or_default() += span;
                if let Some(site) = site_of(&site_id) {
                    let rate = match role {
                        NodeRole::Vrouter => site.vrouter_rate(),
                        _ => site.billing.clone(),
                    };
                    *cost_by_site.entry(site_id.to_string()).or_default() +=
                        accrue_cost(span, &rate);
                    if role == NodeRole::Worker && rate.per_hour > 0.0 {
                        *billed_worker_paid += span;
                    }
                }
            }
        };

    for interval in intervals {
        if prev_node.is_some() && prev_node != Some(&interval.node) {
            close_cycle(
                &mut cycle,
                &mut cost_by_site,
                &mut paid_s_by_site,
                &mut billed_worker_paid,
            );
        }
        prev_node = Some(&interval.node);

        if interval.state == NodeState::Off {
            close_cycle(
                &mut cycle,
                &mut cost_by_site,
                &mut paid_s_by_site,
                &mut billed_worker_paid,
            );
            continue;
        }

        let len = interval.exit_s - interval.enter_s;
        if interval.state == NodeState::Used && interval.role == NodeRole::Worker {
            busy_s += len;
            let billed = interval
                .site
                .as_ref()
                .and_then(site_of)
                .map(|s| s.billing.per_hour > 0.0)
                .unwrap_or(false);
            if billed {
                billed_worker_busy += len;
            }
        }

        match (&mut cycle, &interval.site) {
            (Some((_, _, _, end)), _) => *end = interval.exit_s,
            (None, Some(site)) => {
                cycle = Some((site.clone(), interval.role, interval.enter_s, interval.exit_s));
            }
            (None, None) => {}
        }
    }
    close_cycle(
        &mut cycle,
        &mut cost_by_site,
        &mut paid_s_by_site,
        &mut billed_worker_paid,
    );

    let utilization =
        (billed_worker_paid > 0.0).then(|| billed_worker_busy / billed_worker_paid);

    Summary { makespan_s, busy_s, paid_s_by_site, cost_by_site, utilization }
}

/// Renders the timeline as CSV with a fixed header.
pub fn render_timeline_csv(intervals: &[StateInterval]) -> String {
    let mut out = String::from("node,state,enter_s,exit_s\n");
    for i in intervals {
        out.push_str(&format!(
            "{},{},{},{}\n",
            i.node,
            i.state,
            i.enter_s,
            i.exit_s
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{PhaseDurations, SiteKind};

    fn billed_site(id: &str, per_hour: f64, granularity: u32) -> CloudSite {
        CloudSite {
            site_id: id.into(),
            kind: SiteKind::Public,
            max_instances: 8,
            max_public_ips: 2,
            supports_private_networks: true,
            provisioning_phase_durations: PhaseDurations {
                network_create: 60.0,
                vm_create: 240.0,
                tunnel_setup: 120.0,
                contextualize: 780.0,
            },
            deprovision_duration: 400.0,
            billing: CostRate { per_hour, billing_granularity: granularity },
            vrouter_billing: None,
            availability: 0.99,
        }
    }

    #[test]
    fn one_hour_at_the_hourly_rate_costs_the_hourly_rate() {
        let rate = CostRate { per_hour: 0.0464, billing_granularity: 1 };
        assert!((accrue_cost(3600.0, &rate) - 0.0464).abs() < 1e-12);
    }

    #[test]
    fn fractional_seconds_round_up_to_the_granularity() {
        let per_second = CostRate { per_hour: 3600.0, billing_granularity: 1 };
        // 10.2 s bills as 11 s at 1 unit per second.
        assert!((accrue_cost(10.2, &per_second) - 11.0).abs() < 1e-12);

        let hourly = CostRate { per_hour: 1.0, billing_granularity: 3600 };
        // Up to a full hour bills as one hour...
        assert!((accrue_cost(3599.0, &hourly) - 1.0).abs() < 1e-12);
        // ...and one second more starts the second hour.
        assert!((accrue_cost(3601.0, &hourly) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_or_free_intervals_cost_nothing() {
        let rate = CostRate { per_hour: 1.0, billing_granularity: 1 };
        assert_eq!(accrue_cost(0.0, &rate), 0.0);
        assert_eq!(accrue_cost(-5.0, &rate), 0.0);
        assert_eq!(accrue_cost(1000.0, &CostRate::free()), 0.0);
    }

    #[test]
    fn cost_matches_an_independent_formula_on_sampled_intervals() {
        let mut state = 0x9E37_79B9_7F4A_7C15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _ in 0..10 {
            let interval = (next() % 100_000) as f64 / 10.0;
            let granularity = 1 + (next() % 3600) as u32;
            let per_hour = (next() % 1000) as f64 / 1000.0;
            let rate = CostRate { per_hour, billing_granularity: granularity };

            let got = accrue_cost(interval, &rate);
            // Whole billing periods consumed, charged per period.
            let periods = (interval / f64::from(granularity)).ceil();
            let expected = if interval <= 0.0 || per_hour <= 0.0 {
                0.0
            } else {
                periods * f64::from(granularity) / 3600.0 * per_hour
            };
            assert!((got - expected).abs() < 1e-9, "{interval}s @{per_hour}/{granularity}");
        }
    }

    #[test]
    fn collector_elides_zero_length_intervals_and_partitions_time() {
        let mut m = MetricsCollector::new();
        let node: NodeId = "wn-1".into();
        let site: SiteId = "aws".into();
        m.transition(&node, None, NodeRole::Worker, NodeState::Off, 0.0);
        // Immediate re-transition at t=0: the off interval vanishes.
        m.transition(&node, Some(site.clone()), NodeRole::Worker, NodeState::PoweringOn, 0.0);
        m.transition(&node, Some(site.clone()), NodeRole::Worker, NodeState::Idle, 300.0);
        m.transition(&node, Some(site.clone()), NodeRole::Worker, NodeState::Used, 320.0);
        m.transition(&node, Some(site.clone()), NodeRole::Worker, NodeState::Idle, 350.0);
        let intervals = m.finalize(400.0);

        let states: Vec<NodeState> = intervals.iter().map(|i| i.state).collect();
        assert_eq!(
            states,
            vec![NodeState::PoweringOn, NodeState::Idle, NodeState::Used, NodeState::Idle]
        );
        // The intervals tile [0, 400] without gaps.
        let mut t = 0.0;
        for i in &intervals {
            assert_eq!(i.enter_s, t);
            t = i.exit_s;
        }
        assert_eq!(t, 400.0);
    }

    #[test]
    fn summary_splits_cycles_per_site_and_computes_utilization() {
        let sites = vec![billed_site("aws", 0.0464, 1), {
            let mut s = billed_site("onprem", 0.0, 1);
            s.kind = SiteKind::OnPremises;
            s
        }];
        let mut m = MetricsCollector::new();
        let w1: NodeId = "wn-1".into();
        let aws: SiteId = "aws".into();
        let onprem: SiteId = "onprem".into();

        // One paid cycle at aws: 1000s up, 400 of them busy.
        m.transition(&w1, Some(aws.clone()), NodeRole::Worker, NodeState::PoweringOn, 0.0);
        m.transition(&w1, Some(aws.clone()), NodeRole::Worker, NodeState::Idle, 100.0);
        m.transition(&w1, Some(aws.clone()), NodeRole::Worker, NodeState::Used, 200.0);
        m.transition(&w1, Some(aws.clone()), NodeRole::Worker, NodeState::Idle, 600.0);
        m.transition(&w1, Some(aws.clone()), NodeRole::Worker, NodeState::PoweringOff, 900.0);
        m.transition(&w1, None, NodeRole::Worker, NodeState::Off, 1000.0);
        // Second cycle at the free site: busy time counts, cost does not.
        m.transition(&w1, Some(onprem.clone()), NodeRole::Worker, NodeState::PoweringOn, 1200.0);
        m.transition(&w1, Some(onprem.clone()), NodeRole::Worker, NodeState::Used, 1500.0);
        m.transition(&w1, Some(onprem.clone()), NodeRole::Worker, NodeState::Off, 1700.0);

        let intervals = m.finalize(1700.0);
        let summary = summarize(&intervals, &sites, 1700.0);

        assert_eq!(summary.busy_s, 400.0 + 200.0);
        assert_eq!(summary.paid_s_by_site["aws"], 1000.0);
        assert_eq!(summary.paid_s_by_site["onprem"], 500.0);
        assert!((summary.cost_by_site["aws"] - 1000.0 * 0.0464 / 3600.0).abs() < 1e-9);
        assert_eq!(summary.cost_by_site["onprem"], 0.0);
        // Utilization looks only at the billed site: 400 busy of 1000 paid.
        assert!((summary.utilization.unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn utilization_is_absent_without_billed_worker_time() {
        let mut free = billed_site("onprem", 0.0, 1);
        free.kind = SiteKind::OnPremises;
        let sites = vec![free];
        let mut m = MetricsCollector::new();
        let w1: NodeId = "wn-1".into();
        m.transition(&w1, Some("onprem".into()), NodeRole::Worker, NodeState::Used, 0.0);
        let intervals = m.finalize(100.0);
        let summary = summarize(&intervals, &sites, 100.0);
        assert_eq!(summary.utilization, None);
        assert_eq!(summary.busy_s, 100.0);
    }

    #[test]
    fn routers_bill_at_their_own_rate() {
        let mut site = billed_site("aws", 0.0464, 1);
        site.vrouter_billing =
            Some(CostRate { per_hour: 0.0116, billing_granularity: 1 });
        let sites = vec![site];
        let mut m = MetricsCollector::new();
        let vr: NodeId = "vrouter-aws".into();
        m.transition(&vr, Some("aws".into()), NodeRole::Vrouter, NodeState::PoweringOn, 0.0);
        m.transition(&vr, Some("aws".into()), NodeRole::Vrouter, NodeState::Idle, 300.0);
        m.transition(&vr, None, NodeRole::Vrouter, NodeState::Off, 3600.0);
        let intervals = m.finalize(3600.0);
        let summary = summarize(&intervals, &sites, 3600.0);
        assert!((summary.cost_by_site["aws"] - 0.0116).abs() < 1e-9);
        // Router uptime is paid time but not worker time.
        assert_eq!(summary.paid_s_by_site["aws"], 3600.0);
        assert_eq!(summary.utilization, None);
    }

    #[test]
    fn timeline_csv_has_the_fixed_header_and_one_row_per_interval() {
        let intervals = vec![StateInterval {
            node: "wn-1".into(),
            site: Some("aws".into()),
            role: NodeRole::Worker,
            state: NodeState::PoweringOn,
            enter_s: 540.0,
            exit_s: 1740.0,
        }];
        let csv = render_timeline_csv(&intervals);
        assert_eq!(csv, "node,state,enter_s,exit_s\nwn-1,powering_on,540,1740\n");
    }
}
