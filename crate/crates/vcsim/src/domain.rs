//! Core domain types: sites, cluster templates, nodes, jobs and scenario
//! files, plus the validation that keeps them consistent.

use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::net::Ipv4Net;

/// Identifier of a provider region ("site").
#[derive(
    Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SiteId(String);

impl SiteId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SiteId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// Identifier of a cluster node (front-end, worker, router or client).
#[derive(
    Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// Whether a site bills for capacity or is owned infrastructure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    OnPremises,
    Public,
}

/// Hourly price with a billing granularity in seconds (1 = per-second
/// billing).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostRate {
    pub per_hour: f64,
    #[serde(default = "default_granularity")]
    pub billing_granularity: u32,
}

fn default_granularity() -> u32 {
    1
}

impl CostRate {
    pub fn free() -> Self {
        Self { per_hour: 0.0, billing_granularity: 1 }
    }
}

/// Durations, in simulated seconds, of the provisioning workflow phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseDurations {
    pub network_create: f64,
    pub vm_create: f64,
    pub tunnel_setup: f64,
    pub contextualize: f64,
}

impl PhaseDurations {
    /// Total duration of one provisioning pass.
    pub fn sum(&self) -> f64 {
        self.network_create + self.vm_create + self.tunnel_setup + self.contextualize
    }
}

/// A provider region with quotas, capabilities and billing model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSite {
    pub site_id: SiteId,
    pub kind: SiteKind,
    /// Maximum concurrently existing instances, infrastructure VMs included.
    pub max_instances: u32,
    pub max_public_ips: u32,
    pub supports_private_networks: bool,
    pub provisioning_phase_durations: PhaseDurations,
    /// Duration of a node-removal operation at this site.
    pub deprovision_duration: f64,
    /// Rate billed for worker and front-end instances.
    pub billing: CostRate,
    /// Rate billed for overlay router instances; defaults to `billing`.
    #[serde(default)]
    pub vrouter_billing: Option<CostRate>,
    /// Monitored fraction of successful provisioning requests, in [0, 1].
    pub availability: f64,
}

impl CloudSite {
    pub fn vrouter_rate(&self) -> CostRate {
        self.vrouter_billing.unwrap_or(self.billing)
    }
}

/// Function a node performs in the cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    FrontEnd,
    Worker,
    Vrouter,
    CentralPoint,
    StandAloneClient,
}

/// Power/usage state of a node.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum NodeState {
    Off,
    PoweringOn,
    Idle,
    Used,
    PoweroffScheduled,
    PoweringOff,
    Failed,
}

impl NodeState {
    /// The exhaustive set of legal state transitions.
    pub fn allowed_transition(from: NodeState, to: NodeState) -> bool {
        use NodeState::*;
        matches!(
            (from, to),
            (Off, PoweringOn)
                | (PoweringOn, Idle)
                | (PoweringOn, Failed)
                | (Idle, Used)
                | (Idle, PoweroffScheduled)
                | (Idle, Failed)
                | (Used, Idle)
                | (Used, Failed)
                | (PoweroffScheduled, PoweringOff)
                | (PoweroffScheduled, Idle)
                | (PoweringOff, Off)
                | (Failed, PoweringOff)
        )
    }

    /// States during which a pay-per-use instance accrues cost.
    pub fn is_paid(self) -> bool {
        self != NodeState::Off
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeState::Off => "off",
            NodeState::PoweringOn => "powering_on",
            NodeState::Idle => "idle",
            NodeState::Used => "used",
            NodeState::PoweroffScheduled => "poweroff_scheduled",
            NodeState::PoweringOff => "powering_off",
            NodeState::Failed => "failed",
        }
    }
}

impl fmt::Display for NodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A virtual machine slot in the cluster, tracked across power cycles.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VmInstance {
    pub node_id: NodeId,
    pub site_id: SiteId,
    pub role: NodeRole,
    pub state: NodeState,
    pub has_public_ip: bool,
    pub private_address: Option<Ipv4Addr>,
    /// Job slots offered to the batch queue (0 for infrastructure nodes).
    pub slots: u32,
    /// Simulated time at which the current state was entered.
    pub state_since: f64,
    /// Billed seconds accumulated over all completed power cycles.
    pub paid_seconds: f64,
}

impl VmInstance {
    pub fn new(node_id: NodeId, site_id: SiteId, role: NodeRole, slots: u32) -> Self {
        Self {
            node_id,
            site_id,
            role,
            state: NodeState::Off,
            has_public_ip: false,
            private_address: None,
            slots,
            state_since: 0.0,
            paid_seconds: 0.0,
        }
    }
}

/// Progress of a job through the batch queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Pending,
    Running,
    Done,
}

/// One queued unit of work.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Job {
    pub job_id: u32,
    pub submit_time: f64,
    pub processing_duration: f64,
    pub state: JobState,
    pub assigned_node: Option<NodeId>,
}

/// Inclusive range a job duration is drawn from, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DurationRange {
    pub min: f64,
    pub max: f64,
}

/// A burst of jobs submitted together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadBlock {
    pub job_count: u32,
    /// Seconds between the previous block's submission (or the scenario
    /// start, for the first block) and this block's submission.
    pub inter_block_gap: f64,
    pub duration_distribution: DurationRange,
    /// Optional per-job payload transfer, in seconds at nominal overlay
    /// throughput; charged to jobs running outside the front-end's site
    /// after applying the configured cipher profile.
    #[serde(default)]
    pub transfer_payload_s: Option<f64>,
}

/// Per-site scheduling preference; lower priority wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sla {
    pub site_id: SiteId,
    pub priority: u32,
}

/// Initial worker allocation at one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialWorkers {
    pub site_id: SiteId,
    pub count: u32,
}

/// Shape of the virtual cluster to deploy and operate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterTemplate {
    pub front_end_site: SiteId,
    pub initial_workers: Vec<InitialWorkers>,
    pub max_workers: u32,
    #[serde(default = "default_worker_slots")]
    pub worker_slots: u32,
    /// Seconds a worker may sit idle before a power-off is scheduled.
    #[serde(default = "default_idle_timeout")]
    pub idle_timeout: f64,
    /// Seconds a scheduled power-off stays cancellable.
    #[serde(default = "default_poweroff_grace")]
    pub poweroff_grace: f64,
    pub site_preferences: Vec<Sla>,
}

fn default_worker_slots() -> u32 {
    1
}

fn default_idle_timeout() -> f64 {
    300.0
}

fn default_poweroff_grace() -> f64 {
    120.0
}

impl ClusterTemplate {
    pub fn total_initial_workers(&self) -> u32 {
        self.initial_workers.iter().map(|w| w.count).sum()
    }
}

/// Encryption profile applied to overlay traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CipherMode {
    None,
    Light,
    Full,
}

/// Throughput/latency model of the overlay cipher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CipherProfile {
    pub mode: CipherMode,
    /// Fraction of nominal throughput retained (1 = no slowdown).
    pub throughput_factor: f64,
    /// Seconds added per overlay hop.
    pub latency_penalty: f64,
}

impl CipherProfile {
    pub fn none() -> Self {
        Self { mode: CipherMode::None, throughput_factor: 1.0, latency_penalty: 0.0 }
    }
}

impl Default for CipherProfile {
    fn default() -> Self {
        Self::none()
    }
}

/// Overlay planning inputs carried by a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlayConfig {
    #[serde(default = "default_base_prefix")]
    pub base_prefix: Ipv4Net,
    #[serde(default)]
    pub cipher: CipherProfile,
    /// Sites that host a hot-backup central point, in failover order.
    #[serde(default)]
    pub backup_central_point_sites: Vec<SiteId>,
    /// Optional manually pinned site subnets; unlisted sites are assigned
    /// automatically.
    #[serde(default)]
    pub manual_subnets: BTreeMap<SiteId, Ipv4Net>,
}

fn default_base_prefix() -> Ipv4Net {
    "10.8.0.0/16".parse().expect("valid built-in prefix")
}

impl Default for OverlayConfig {
    fn default() -> Self {
        Self {
            base_prefix: default_base_prefix(),
            cipher: CipherProfile::none(),
            backup_central_point_sites: Vec::new(),
            manual_subnets: BTreeMap::new(),
        }
    }
}

/// An injected infrastructure failure: the monitoring report that node
/// `node_id` stopped responding is delivered `detection_delay` seconds
/// after the failure occurs at `at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub node_id: NodeId,
    pub at: f64,
    #[serde(default = "default_detection_delay")]
    pub detection_delay: f64,
}

fn default_detection_delay() -> f64 {
    180.0
}

/// Engine tunables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    /// Seconds between elasticity policy evaluations.
    #[serde(default = "default_policy_tick")]
    pub policy_tick: f64,
    /// Hard cap on simulated time; exceeding it is an engine error.
    #[serde(default = "default_max_sim_time")]
    pub max_sim_time: f64,
    /// Allow several provisioning operations to run concurrently instead of
    /// serializing them through a single in-flight update.
    #[serde(default)]
    pub parallel_provisioning: bool,
    /// One-time software setup a worker pays on the first job of each power
    /// cycle, before that job starts processing.
    #[serde(default = "default_worker_setup_duration")]
    pub worker_setup_duration: f64,
}

fn default_policy_tick() -> f64 {
    30.0
}

fn default_max_sim_time() -> f64 {
    30.0 * 24.0 * 3600.0
}

fn default_worker_setup_duration() -> f64 {
    270.0
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            policy_tick: default_policy_tick(),
            max_sim_time: default_max_sim_time(),
            parallel_provisioning: false,
            worker_setup_duration: default_worker_setup_duration(),
        }
    }
}

/// A complete simulation input: sites, cluster shape, workload, overlay
/// plan and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub sites: Vec<CloudSite>,
    pub template: ClusterTemplate,
    pub workload: Vec<WorkloadBlock>,
    #[serde(default)]
    pub overlay: OverlayConfig,
    pub seed: u64,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub engine: EngineConfig,
}

impl Scenario {
    /// Parses a scenario from JSON text. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self, DomainError> {
        serde_json::from_str(text)
            .map_err(|e| DomainError::BadScenario { detail: e.to_string() })
    }

    /// Reads and parses a scenario file.
    pub fn from_path(path: &Path) -> Result<Self, DomainError> {
        let text = std::fs::read_to_string(path).map_err(|e| DomainError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn site(&self, id: &SiteId) -> Option<&CloudSite> {
        self.sites.iter().find(|s| &s.site_id == id)
    }
}

/// Validation and parsing failures for domain inputs.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DomainError {
    #[error("unknown site `{site}` referenced by {referrer}")]
    UnknownSite { site: SiteId, referrer: String },
    #[error(
        "quota infeasible at `{site}`: needs {needed} instances, quota is {max}"
    )]
    QuotaInfeasible { site: SiteId, needed: u32, max: u32 },
    #[error("front-end site `{site}` offers no public IP")]
    NoPublicIpAtFrontEnd { site: SiteId },
    #[error("bad bounds: {detail}")]
    BadBounds { detail: String },
    #[error("duplicate site `{site}`")]
    DuplicateSite { site: SiteId },
    #[error("site `{site}` has {count} scheduling preference entries, expected 1")]
    SlaCoverage { site: SiteId, count: usize },
    #[error("subnet overlap: {a} and {b}")]
    SubnetOverlap { a: String, b: String },
    #[error("bad cipher profile: {detail}")]
    BadCipher { detail: String },
    #[error("bad site `{site}`: {detail}")]
    BadSite { site: SiteId, detail: String },
    #[error("bad workload block {index}: {detail}")]
    BadWorkload { index: usize, detail: String },
    #[error("bad fault spec for `{node}`: {detail}")]
    BadFault { node: NodeId, detail: String },
    #[error("invalid scenario: {detail}")]
    BadScenario { detail: String },
    #[error("cannot read `{path}`: {detail}")]
    Io { path: String, detail: String },
}

/// Checks that a cluster template is deployable on the given sites.
pub fn validate_template(
    template: &ClusterTemplate,
    sites: &[CloudSite],
) -> Result<(), DomainError> {
    let site = |id: &SiteId, referrer: &str| {
        sites.iter().find(|s| &s.site_id == id).ok_or(DomainError::UnknownSite {
            site: id.clone(),
            referrer: referrer.to_string(),
        })
    };

    let fe_site = site(&template.front_end_site, "template.front_end_site")?;
    if fe_site.max_public_ips == 0 {
        return Err(DomainError::NoPublicIpAtFrontEnd {
            site: fe_site.site_id.clone(),
        });
    }

    if template.max_workers == 0 {
        return Err(DomainError::BadBounds {
            detail: "max_workers must be at least 1".into(),
        });
    }
    if template.worker_slots == 0 {
        return Err(DomainError::BadBounds {
            detail: "worker_slots must be at least 1".into(),
        });
    }
    if template.idle_timeout < 0.0 || template.poweroff_grace < 0.0 {
        return Err(DomainError::BadBounds {
            detail: "idle_timeout and poweroff_grace must be non-negative".into(),
        });
    }
    let initial = template.total_initial_workers();
    if initial > template.max_workers {
        return Err(DomainError::BadBounds {
            detail: format!(
                "{initial} initial workers exceed max_workers {}",
                template.max_workers
            ),
        });
    }

    for pref in &template.site_preferences {
        site(&pref.site_id, "template.site_preferences")?;
    }

    // Initial instances per site: workers, plus the front-end at its site,
    // plus one overlay router at any other site that hosts workers over a
    // private network.
    for alloc in &template.initial_workers {
        let s = site(&alloc.site_id, "template.initial_workers")?;
        let mut needed = alloc.count;
        if s.site_id == template.front_end_site {
            needed += 1;
        } else if alloc.count > 0 && s.supports_private_networks {
            needed += 1;
        }
        if needed > s.max_instances {
            return Err(DomainError::QuotaInfeasible {
                site: s.site_id.clone(),
                needed,
                max: s.max_instances,
            });
        }
    }
    // A front-end site without listed workers still hosts the front-end.
    if !template
        .initial_workers
        .iter()
        .any(|a| a.site_id == template.front_end_site)
        && fe_site.max_instances < 1
    {
        return Err(DomainError::QuotaInfeasible {
            site: fe_site.site_id.clone(),
            needed: 1,
            max: fe_site.max_instances,
        });
    }

    Ok(())
}

/// Full cross-reference validation of a parsed scenario.
pub fn validate_scenario(scenario: &Scenario) -> Result<(), DomainError> {
    // Sites must be unique and internally sane.
    for (i, s) in scenario.sites.iter().enumerate() {
        if scenario.sites[..i].iter().any(|o| o.site_id == s.site_id) {
            return Err(DomainError::DuplicateSite { site: s.site_id.clone() });
        }
        if !(0.0..=1.0).contains(&s.availability) {
            return Err(DomainError::BadSite {
                site: s.site_id.clone(),
                detail: format!("availability {} outside [0, 1]", s.availability),
            });
        }
        if s.max_instances == 0 {
            return Err(DomainError::BadSite {
                site: s.site_id.clone(),
                detail: "max_instances must be at least 1".into(),
            });
        }
        let p = &s.provisioning_phase_durations;
        if [p.network_create, p.vm_create, p.tunnel_setup, p.contextualize, s.deprovision_duration]
            .iter()
            .any(|d| *d < 0.0 || !d.is_finite())
        {
            return Err(DomainError::BadSite {
                site: s.site_id.clone(),
                detail: "phase durations must be finite and non-negative".into(),
            });
        }
        for rate in [Some(s.billing), s.vrouter_billing].into_iter().flatten() {
            if rate.per_hour < 0.0 || !rate.per_hour.is_finite() {
                return Err(DomainError::BadSite {
                    site: s.site_id.clone(),
                    detail: "billing rate must be finite and non-negative".into(),
                });
            }
            if rate.billing_granularity == 0 {
                return Err(DomainError::BadSite {
                    site: s.site_id.clone(),
                    detail: "billing_granularity must be at least 1 second".into(),
                });
            }
        }
    }

    validate_template(&scenario.template, &scenario.sites)?;

    // Every site carries exactly one scheduling preference entry.
    for s in &scenario.sites {
        let count = scenario
            .template
            .site_preferences
            .iter()
            .filter(|p| p.site_id == s.site_id)
            .count();
        if count != 1 {
            return Err(DomainError::SlaCoverage { site: s.site_id.clone(), count });
        }
    }

    for (i, block) in scenario.workload.iter().enumerate() {
        let d = &block.duration_distribution;
        if !(d.min.is_finite() && d.max.is_finite()) || d.min <= 0.0 || d.min > d.max {
            return Err(DomainError::BadWorkload {
                index: i,
                detail: format!("duration range [{}, {}] is invalid", d.min, d.max),
            });
        }
        if block.inter_block_gap < 0.0 || !block.inter_block_gap.is_finite() {
            return Err(DomainError::BadWorkload {
                index: i,
                detail: "inter_block_gap must be non-negative".into(),
            });
        }
        if let Some(payload) = block.transfer_payload_s {
            if payload < 0.0 || !payload.is_finite() {
                return Err(DomainError::BadWorkload {
                    index: i,
                    detail: "transfer_payload_s must be non-negative".into(),
                });
            }
        }
    }

    let overlay = &scenario.overlay;
    let cipher = &overlay.cipher;
    if cipher.mode == CipherMode::None
        && (cipher.throughput_factor != 1.0 || cipher.latency_penalty != 0.0)
    {
        return Err(DomainError::BadCipher {
            detail: "mode `none` requires throughput_factor 1 and latency_penalty 0"
                .into(),
        });
    }
    if cipher.throughput_factor <= 0.0 || cipher.latency_penalty < 0.0 {
        return Err(DomainError::BadCipher {
            detail: "throughput_factor must be positive, latency_penalty non-negative"
                .into(),
        });
    }

    for backup in &overlay.backup_central_point_sites {
        let s = scenario.site(backup).ok_or(DomainError::UnknownSite {
            site: backup.clone(),
            referrer: "overlay.backup_central_point_sites".to_string(),
        })?;
        if s.max_public_ips == 0 {
            return Err(DomainError::BadSite {
                site: s.site_id.clone(),
                detail: "a backup central point needs a public IP at its site".into(),
            });
        }
    }

    let manual: Vec<(&SiteId, &Ipv4Net)> = overlay.manual_subnets.iter().collect();
    for (site, _) in &manual {
        if scenario.site(site).is_none() {
            return Err(DomainError::UnknownSite {
                site: (*site).clone(),
                referrer: "overlay.manual_subnets".to_string(),
            });
        }
    }
    for (i, (sa, na)) in manual.iter().enumerate() {
        for (sb, nb) in &manual[i + 1..] {
            if na.overlaps(nb) {
                return Err(DomainError::SubnetOverlap {
                    a: format!("{sa} {na}"),
                    b: format!("{sb} {nb}"),
                });
            }
        }
        if !overlay.base_prefix.contains(na.addr()) {
            return Err(DomainError::SubnetOverlap {
                a: format!("{sa} {na}"),
                b: format!("outside base prefix {}", overlay.base_prefix),
            });
        }
    }

    for fault in &scenario.faults {
        if fault.at < 0.0 || fault.detection_delay < 0.0 {
            return Err(DomainError::BadFault {
                node: fault.node_id.clone(),
                detail: "times must be non-negative".into(),
            });
        }
    }

    if scenario.engine.policy_tick <= 0.0 || scenario.engine.max_sim_time <= 0.0 {
        return Err(DomainError::BadScenario {
            detail: "engine.policy_tick and engine.max_sim_time must be positive"
                .into(),
        });
    }
    if !scenario.engine.worker_setup_duration.is_finite()
        || scenario.engine.worker_setup_duration < 0.0
    {
        return Err(DomainError::BadScenario {
            detail: "engine.worker_setup_duration must be non-negative".into(),
        });
    }

    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site(id: &str, kind: SiteKind, max_instances: u32, max_public_ips: u32) -> CloudSite {
        CloudSite {
            site_id: id.into(),
            kind,
            max_instances,
            max_public_ips,
            supports_private_networks: true,
            provisioning_phase_durations: PhaseDurations {
                network_create: 30.0,
                vm_create: 120.0,
                tunnel_setup: 30.0,
                contextualize: 120.0,
            },
            deprovision_duration: 60.0,
            billing: CostRate::free(),
            vrouter_billing: None,
            availability: 1.0,
        }
    }

    fn template(fe: &str, initial: &[(&str, u32)], max_workers: u32) -> ClusterTemplate {
        ClusterTemplate {
            front_end_site: fe.into(),
            initial_workers: initial
                .iter()
                .map(|(s, n)| InitialWorkers { site_id: (*s).into(), count: *n })
                .collect(),
            max_workers,
            worker_slots: 1,
            idle_timeout: 300.0,
            poweroff_grace: 120.0,
            site_preferences: vec![
                Sla { site_id: "onprem".into(), priority: 1 },
                Sla { site_id: "cloud".into(), priority: 2 },
            ],
        }
    }

    fn two_sites() -> Vec<CloudSite> {
        vec![
            site("onprem", SiteKind::OnPremises, 3, 1),
            site("cloud", SiteKind::Public, 8, 2),
        ]
    }

    #[test]
    fn accepts_front_end_plus_two_workers_within_quota() {
        let t = template("onprem", &[("onprem", 2)], 5);
        assert_eq!(validate_template(&t, &two_sites()), Ok(()));
    }

    #[test]
    fn rejects_unknown_front_end_site() {
        let t = template("nowhere", &[("onprem", 2)], 5);
        assert!(matches!(
            validate_template(&t, &two_sites()),
            Err(DomainError::UnknownSite { .. })
        ));
    }

    #[test]
    fn rejects_initial_workers_beyond_site_quota() {
        // Front-end plus three workers needs four instances on a quota of 3.
        let t = template("onprem", &[("onprem", 3)], 5);
        assert!(matches!(
            validate_template(&t, &two_sites()),
            Err(DomainError::QuotaInfeasible { needed: 4, max: 3, .. })
        ));
    }

    #[test]
    fn counts_the_overlay_router_against_remote_site_quota() {
        let mut sites = two_sites();
        sites[1].max_instances = 2;
        // Two workers at the remote site need a router too: 3 > 2.
        let t = template("onprem", &[("cloud", 2)], 5);
        assert!(matches!(
            validate_template(&t, &sites),
            Err(DomainError::QuotaInfeasible { needed: 3, max: 2, .. })
        ));
    }

    #[test]
    fn rejects_front_end_site_without_public_ip() {
        let mut sites = two_sites();
        sites[0].max_public_ips = 0;
        let t = template("onprem", &[("onprem", 2)], 5);
        assert!(matches!(
            validate_template(&t, &sites),
            Err(DomainError::NoPublicIpAtFrontEnd { .. })
        ));
    }

    #[test]
    fn rejects_max_workers_below_initial_workers() {
        let t = template("onprem", &[("onprem", 2)], 1);
        assert!(matches!(
            validate_template(&t, &two_sites()),
            Err(DomainError::BadBounds { .. })
        ));
    }

    #[test]
    fn node_state_edges_match_the_lifecycle() {
        use NodeState::*;
        let states = [Off, PoweringOn, Idle, Used, PoweroffScheduled, PoweringOff, Failed];
        let allowed: Vec<(NodeState, NodeState)> = states
            .iter()
            .flat_map(|a| states.iter().map(move |b| (*a, *b)))
            .filter(|(a, b)| NodeState::allowed_transition(*a, *b))
            .collect();
        assert_eq!(allowed.len(), 12);
        assert!(NodeState::allowed_transition(PoweroffScheduled, Idle));
        assert!(!NodeState::allowed_transition(Off, Idle));
        assert!(!NodeState::allowed_transition(Failed, Idle));
        assert!(!NodeState::allowed_transition(Used, PoweroffScheduled));
    }

    #[test]
    fn scenario_parsing_rejects_unknown_keys() {
        let text = r#"{
            "sites": [],
            "template": {
                "front_end_site": "onprem",
                "initial_workers": [],
                "max_workers": 1,
                "site_preferences": []
            },
            "workload": [],
            "seed": 0,
            "surprise": true
        }"#;
        let err = Scenario::from_json(text).unwrap_err();
        assert!(matches!(err, DomainError::BadScenario { .. }));
        assert!(err.to_string().contains("surprise"));
    }

    #[test]
    fn scenario_defaults_fill_in_optional_fields() {
        let text = r#"{
            "sites": [],
            "template": {
                "front_end_site": "onprem",
                "initial_workers": [],
                "max_workers": 1,
                "site_preferences": []
            },
            "workload": [],
            "seed": 7
        }"#;
        let s = Scenario::from_json(text).unwrap();
        assert_eq!(s.template.worker_slots, 1);
        assert_eq!(s.template.idle_timeout, 300.0);
        assert_eq!(s.template.poweroff_grace, 120.0);
        assert_eq!(s.overlay.base_prefix.to_string(), "10.8.0.0/16");
        assert_eq!(s.overlay.cipher, CipherProfile::none());
        assert_eq!(s.engine.policy_tick, 30.0);
        assert!(!s.engine.parallel_provisioning);
        assert!(s.faults.is_empty());
    }

    #[test]
    fn scenario_validation_flags_overlapping_manual_subnets() {
        let mut overlay = OverlayConfig::default();
        overlay.manual_subnets.insert("onprem".into(), "10.8.0.0/24".parse().unwrap());
        overlay.manual_subnets.insert("cloud".into(), "10.8.0.128/25".parse().unwrap());
        let scenario = Scenario {
            sites: two_sites(),
            template: template("onprem", &[("onprem", 2)], 5),
            workload: vec![],
            overlay,
            seed: 0,
            faults: vec![],
            engine: EngineConfig::default(),
        };
        assert!(matches!(
            validate_scenario(&scenario),
            Err(DomainError::SubnetOverlap { .. })
        ));
    }

    #[test]
    fn scenario_validation_requires_one_preference_entry_per_site() {
        let mut t = template("onprem", &[("onprem", 2)], 5);
        t.site_preferences.pop();
        let scenario = Scenario {
            sites: two_sites(),
            template: t,
            workload: vec![],
            overlay: OverlayConfig::default(),
            seed: 0,
            faults: vec![],
            engine: EngineConfig::default(),
        };
        assert!(matches!(
            validate_scenario(&scenario),
            Err(DomainError::SlaCoverage { .. })
        ));
    }

    #[test]
    fn cipher_none_must_be_cost_free() {
        let scenario = Scenario {
            sites: two_sites(),
            template: template("onprem", &[("onprem", 2)], 5),
            workload: vec![],
            overlay: OverlayConfig {
                cipher: CipherProfile {
                    mode: CipherMode::None,
                    throughput_factor: 0.8,
                    latency_penalty: 0.0,
                },
                ..OverlayConfig::default()
            },
            seed: 0,
            faults: vec![],
            engine: EngineConfig::default(),
        };
        assert!(matches!(
            validate_scenario(&scenario),
            Err(DomainError::BadCipher { .. })
        ));
    }
}
