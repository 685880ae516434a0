//! Overlay VPN planning: star topology around a central point, deterministic
//! subnet assignment, route derivation, path tracing and central-point
//! failover.
//!
//! The overlay joins every site's private network through tunnels that all
//! terminate at a central point co-located with the cluster front-end — the
//! only node holding a public IP. Sites that support private networks get a
//! router node bridging their LAN into the overlay; nodes at sites without
//! that support join individually as stand-alone clients.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use serde::Serialize;

use crate::domain::{CloudSite, NodeId, NodeRole, SiteId};
use crate::net::{Ipv4Net, NetError};

pub use crate::domain::{CipherMode, CipherProfile};

/// Site subnet block size. Every site receives one such block out of the
/// overlay base prefix; two more blocks are reserved for tunnel endpoint
/// pairs and for stand-alone clients.
const SITE_BLOCK_LEN: u8 = 24;

/// Overlay planning and lookup failures.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OverlayError {
    #[error("no public IP available at site `{site}`")]
    NoPublicIpAvailable { site: SiteId },
    #[error("cannot plan an overlay for an empty placement")]
    EmptyPlacement,
    #[error("prefix exhausted: {detail}")]
    PrefixExhausted { detail: String },
    #[error("addresses not assigned yet; run address assignment first")]
    UnassignedAddresses,
    #[error("no route from `{src}` to `{dst}`")]
    Unreachable { src: NodeId, dst: NodeId },
    #[error("no backup central point configured")]
    NoBackupCentralPoint,
    #[error("client subject `{subject}` is already registered")]
    DuplicateSubject { subject: String },
    #[error("site `{site}` does not support private networks")]
    PrivateNetworksRequired { site: SiteId },
    #[error("unknown node `{node}`")]
    UnknownNode { node: NodeId },
    #[error(transparent)]
    AddressMath(#[from] NetError),
}

/// Where a node is placed when the overlay is planned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodePlacement {
    pub node_id: NodeId,
    pub site_id: SiteId,
    pub role: NodeRole,
}

/// The address block a site receives, with its gateway and the range left
/// for workers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SubnetAssignment {
    pub site_id: SiteId,
    pub prefix: Ipv4Net,
    pub gateway_address: Ipv4Addr,
    pub dhcp_range: (Ipv4Addr, Ipv4Addr),
}

/// A point-to-point tunnel from a client (router or stand-alone node) to a
/// central point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Tunnel {
    pub client_node: NodeId,
    pub server_node: NodeId,
    pub client_tunnel_address: Option<Ipv4Addr>,
    pub server_tunnel_address: Option<Ipv4Addr>,
    /// Hot-standby tunnels to backup central points stay inactive until a
    /// failover promotes their server.
    pub active: bool,
}

/// An X.509-style client identity pre-registered at the central point,
/// carrying the static network configuration handed to that client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClientCredential {
    pub subject: String,
    pub node_id: NodeId,
    /// Subnet announced behind this client; present for site routers only.
    pub static_subnet: Option<Ipv4Net>,
    /// Fixed overlay address; present for stand-alone clients only.
    pub static_address: Option<Ipv4Addr>,
}

/// What a route matches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteTarget {
    Default,
    Net(Ipv4Net),
    Host(Ipv4Addr),
}

/// Where a matched packet is sent next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NextHop {
    /// A router on the local network segment.
    Gateway(Ipv4Addr),
    /// Through the tunnel whose far end is `peer`.
    Tunnel { peer: NodeId, endpoint: Ipv4Addr },
}

/// One routing table entry of one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteEntry {
    pub target: RouteTarget,
    pub next_hop: NextHop,
}

/// The planned overlay: central points, per-site routers, stand-alone
/// clients, subnets, tunnels and registered credentials.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlayTopology {
    /// Central points in failover order; the first is active.
    pub central_points: Vec<NodeId>,
    /// Per-site overlay router, for sites bridged as whole networks.
    pub vrouters: BTreeMap<SiteId, NodeId>,
    /// Nodes joined individually because their site lacks private networks.
    pub stand_alone_clients: BTreeSet<NodeId>,
    /// Standby central points at sites without private networks: they have
    /// no LAN to join and draw a fixed overlay address like a stand-alone
    /// client.
    pub loose_central_points: BTreeSet<NodeId>,
    /// Site subnets; populated by address assignment.
    pub local_subnets: BTreeMap<SiteId, SubnetAssignment>,
    pub tunnels: Vec<Tunnel>,
    pub cipher: CipherProfile,
    /// Site each overlay node lives at.
    pub node_sites: BTreeMap<NodeId, SiteId>,
    pub node_roles: BTreeMap<NodeId, NodeRole>,
    /// Overlay address of each node; populated by address assignment.
    pub node_addresses: BTreeMap<NodeId, Ipv4Addr>,
    /// Credentials by subject.
    pub credentials: BTreeMap<String, ClientCredential>,
    /// Site subnets pinned by the operator instead of auto-assigned.
    pub pinned_subnets: BTreeMap<SiteId, Ipv4Net>,
    front_end_site: SiteId,
    /// Reserved block for tunnel endpoint pairs; set during assignment.
    tunnel_block: Option<Ipv4Net>,
    /// Reserved block for stand-alone clients; set during assignment.
    stand_alone_block: Option<Ipv4Net>,
}

impl OverlayTopology {
    pub fn front_end_site(&self) -> &SiteId {
        &self.front_end_site
    }

    /// The currently active central point.
    pub fn primary(&self) -> &NodeId {
        &self.central_points[0]
    }

    /// Nodes that require a public IP: exactly the central points.
    pub fn public_ip_nodes(&self) -> &[NodeId] {
        &self.central_points
    }

    /// The node acting as LAN gateway for a site, if the site is bridged.
    pub fn gateway_node(&self, site: &SiteId) -> Option<&NodeId> {
        if let Some(vr) = self.vrouters.get(site) {
            return Some(vr);
        }
        // The front-end (primary central point at planning time) is its own
        // site's gateway; a backup central point fills that role at a site
        // with no router of its own.
        self.central_points
            .iter()
            .find(|cp| self.node_sites.get(*cp) == Some(site))
    }

    fn site_nodes(&self, site: &SiteId) -> Vec<&NodeId> {
        self.node_sites
            .iter()
            .filter(|(n, s)| {
                *s == site
                    && !self.stand_alone_clients.contains(*n)
                    && !self.loose_central_points.contains(*n)
            })
            .map(|(n, _)| n)
            .collect()
    }

    /// Marks tunnels active when they point at the primary and their client
    /// is registered.
    pub fn activate_tunnels(&mut self) {
        let primary = self.central_points[0].clone();
        let registered: BTreeSet<NodeId> =
            self.credentials.values().map(|c| c.node_id.clone()).collect();
        for tunnel in &mut self.tunnels {
            tunnel.active =
                tunnel.server_node == primary && registered.contains(&tunnel.client_node);
        }
    }
}

/// Plans the overlay structure for a placement: picks the central points,
/// decides which sites get routers, and lays out the tunnel mesh. Addresses
/// are not assigned yet.
pub fn plan_topology(
    sites: &[CloudSite],
    placement: &[NodePlacement],
    front_end_site: &SiteId,
    backup_cp_sites: &[SiteId],
) -> Result<OverlayTopology, OverlayError> {
    if placement.is_empty() {
        return Err(OverlayError::EmptyPlacement);
    }
    let site = |id: &SiteId| sites.iter().find(|s| &s.site_id == id);

    let fe_site = site(front_end_site).ok_or_else(|| OverlayError::UnknownNode {
        node: NodeId::new(format!("front-end@{front_end_site}")),
    })?;
    if fe_site.max_public_ips == 0 {
        return Err(OverlayError::NoPublicIpAvailable { site: front_end_site.clone() });
    }
    if !fe_site.supports_private_networks {
        return Err(OverlayError::PrivateNetworksRequired {
            site: front_end_site.clone(),
        });
    }

    let front_end = placement
        .iter()
        .find(|p| p.role == NodeRole::FrontEnd)
        .ok_or(OverlayError::EmptyPlacement)?;

    let mut topo = OverlayTopology {
        central_points: vec![front_end.node_id.clone()],
        vrouters: BTreeMap::new(),
        stand_alone_clients: BTreeSet::new(),
        loose_central_points: BTreeSet::new(),
        local_subnets: BTreeMap::new(),
        tunnels: Vec::new(),
        cipher: CipherProfile::none(),
        node_sites: BTreeMap::new(),
        node_roles: BTreeMap::new(),
        node_addresses: BTreeMap::new(),
        credentials: BTreeMap::new(),
        pinned_subnets: BTreeMap::new(),
        front_end_site: front_end_site.clone(),
        tunnel_block: None,
        stand_alone_block: None,
    };

    for p in placement {
        topo.node_sites.insert(p.node_id.clone(), p.site_id.clone());
        topo.node_roles.insert(p.node_id.clone(), p.role);
    }

    // Backup central points get a dedicated node at each configured site.
    for backup_site in backup_cp_sites {
        let s = site(backup_site).ok_or_else(|| OverlayError::UnknownNode {
            node: NodeId::new(format!("central-point@{backup_site}")),
        })?;
        if s.max_public_ips == 0 {
            return Err(OverlayError::NoPublicIpAvailable { site: backup_site.clone() });
        }
        let cp_id = NodeId::new(format!("cp-{backup_site}"));
        topo.central_points.push(cp_id.clone());
        topo.node_sites.insert(cp_id.clone(), backup_site.clone());
        topo.node_roles.insert(cp_id, NodeRole::CentralPoint);
    }

    // Classify each populated remote site: bridged through a router when
    // private networking hosts workers there, or a source of stand-alone
    // clients otherwise.
    let mut populated: BTreeSet<SiteId> = topo.node_sites.values().cloned().collect();
    populated.insert(front_end_site.clone());
    for site_id in &populated {
        if site_id == front_end_site {
            continue;
        }
        let s = site(site_id).ok_or_else(|| OverlayError::UnknownNode {
            node: NodeId::new(format!("site@{site_id}")),
        })?;
        let hosts_workers = topo
            .node_sites
            .iter()
            .any(|(n, s)| s == site_id && topo.node_roles[n] == NodeRole::Worker);
        if s.supports_private_networks {
            if hosts_workers {
                let vr_id = NodeId::new(format!("vrouter-{site_id}"));
                topo.node_sites.insert(vr_id.clone(), site_id.clone());
                topo.node_roles.insert(vr_id.clone(), NodeRole::Vrouter);
                topo.vrouters.insert(site_id.clone(), vr_id);
            }
        } else {
            let standalone: Vec<NodeId> = topo
                .node_sites
                .iter()
                .filter(|(n, s)| {
                    *s == site_id && topo.node_roles[*n] == NodeRole::Worker
                })
                .map(|(n, _)| n.clone())
                .collect();
            for node in standalone {
                topo.node_roles.insert(node.clone(), NodeRole::StandAloneClient);
                topo.stand_alone_clients.insert(node);
            }
            // A central point here has no LAN to join.
            let loose: Vec<NodeId> = topo
                .node_sites
                .iter()
                .filter(|(n, s)| {
                    *s == site_id && topo.node_roles[*n] == NodeRole::CentralPoint
                })
                .map(|(n, _)| n.clone())
                .collect();
            topo.loose_central_points.extend(loose);
        }
    }

    // One tunnel per client per foreign central point, primary first.
    // Standby central points are clients of the star themselves, so failover
    // state stays synchronized; all tunnels start inactive until
    // registration and activation decide otherwise.
    let mut clients: Vec<NodeId> = topo.vrouters.values().cloned().collect();
    clients.extend(topo.stand_alone_clients.iter().cloned());
    clients.extend(topo.central_points.iter().skip(1).cloned());
    clients.sort();
    for client in &clients {
        for cp in &topo.central_points {
            if cp == client {
                continue;
            }
            topo.tunnels.push(Tunnel {
                client_node: client.clone(),
                server_node: cp.clone(),
                client_tunnel_address: None,
                server_tunnel_address: None,
                active: false,
            });
        }
    }
    topo.tunnels
        .sort_by(|a, b| (&a.client_node, &a.server_node).cmp(&(&b.client_node, &b.server_node)));

    Ok(topo)
}

/// Assigns subnets and addresses: the front-end's site takes the first site
/// block, remaining sites follow in lexicographic order, and the two highest
/// usable blocks are reserved for tunnel endpoints and stand-alone clients.
pub fn assign_addresses(
    topo: &mut OverlayTopology,
    base_prefix: Ipv4Net,
) -> Result<(), OverlayError> {
    let capacity = base_prefix.subnet_count(SITE_BLOCK_LEN);
    if capacity < 3 {
        return Err(OverlayError::PrefixExhausted {
            detail: format!(
                "{base_prefix} cannot hold site blocks plus two reserved blocks"
            ),
        });
    }
    let tunnel_block = base_prefix.subnet(SITE_BLOCK_LEN, (capacity - 2) as u32)?;
    let stand_alone_block = base_prefix.subnet(SITE_BLOCK_LEN, (capacity - 3) as u32)?;

    // Sites needing a local subnet: every bridged site, front-end first.
    let mut bridged: Vec<SiteId> = topo
        .node_sites
        .iter()
        .filter(|(n, _)| {
            !topo.stand_alone_clients.contains(*n)
                && !topo.loose_central_points.contains(*n)
        })
        .map(|(_, s)| s.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|s| *s != topo.front_end_site)
        .collect();
    bridged.sort();
    let mut ordered = vec![topo.front_end_site.clone()];
    ordered.extend(bridged);

    if (ordered.len() as u64) > capacity - 3 {
        return Err(OverlayError::PrefixExhausted {
            detail: format!(
                "{} sites exceed the {} site blocks available in {base_prefix}",
                ordered.len(),
                capacity - 3
            ),
        });
    }

    let pinned: BTreeSet<Ipv4Net> = topo.pinned_subnets.values().copied().collect();
    let mut next_index = 0u32;
    let mut assignments = BTreeMap::new();
    for site_id in &ordered {
        let prefix = match topo.pinned_subnets.get(site_id) {
            Some(p) => *p,
            None => loop {
                if u64::from(next_index) > capacity - 4 {
                    return Err(OverlayError::PrefixExhausted {
                        detail: format!("no free site block left in {base_prefix}"),
                    });
                }
                let candidate = base_prefix.subnet(SITE_BLOCK_LEN, next_index)?;
                next_index += 1;
                if !pinned.iter().any(|p| p.overlaps(&candidate)) {
                    break candidate;
                }
            },
        };
        let gateway = prefix.host(1)?;
        let last = (prefix.size() - 2) as u32;
        assignments.insert(
            site_id.clone(),
            SubnetAssignment {
                site_id: site_id.clone(),
                prefix,
                gateway_address: gateway,
                dhcp_range: (prefix.host(2)?, prefix.host(last)?),
            },
        );
    }

    // Per-site node addresses: the gateway owner takes the gateway address,
    // everyone else follows in node-id order.
    let mut addresses: BTreeMap<NodeId, Ipv4Addr> = BTreeMap::new();
    for (site_id, subnet) in &assignments {
        let gateway_owner = topo.gateway_node(site_id).cloned();
        let mut members: Vec<NodeId> =
            topo.site_nodes(site_id).into_iter().cloned().collect();
        members.sort();
        let mut host_index = 2u32;
        for node in members {
            if Some(&node) == gateway_owner.as_ref() {
                addresses.insert(node, subnet.gateway_address);
                continue;
            }
            if u64::from(host_index) > subnet.prefix.size() - 2 {
                return Err(OverlayError::PrefixExhausted {
                    detail: format!("site block {} is full", subnet.prefix),
                });
            }
            addresses.insert(node, subnet.prefix.host(host_index)?);
            host_index += 1;
        }
    }

    // Stand-alone clients draw fixed addresses from their reserved block;
    // central points without a LAN of their own follow after them.
    let mut sa_index = 1u32;
    let pool_nodes: Vec<NodeId> = topo
        .stand_alone_clients
        .iter()
        .chain(topo.loose_central_points.iter())
        .cloned()
        .collect();
    for node in pool_nodes {
        if u64::from(sa_index) > stand_alone_block.size() - 2 {
            return Err(OverlayError::PrefixExhausted {
                detail: format!("stand-alone block {stand_alone_block} is full"),
            });
        }
        addresses.insert(node, stand_alone_block.host(sa_index)?);
        sa_index += 1;
    }

    // Tunnel endpoint pairs, four addresses per pair, in tunnel order.
    let pair_capacity = (tunnel_block.size() / 4).saturating_sub(1);
    for (k, tunnel) in topo.tunnels.iter_mut().enumerate() {
        if k as u64 >= pair_capacity {
            return Err(OverlayError::PrefixExhausted {
                detail: format!("tunnel block {tunnel_block} is full"),
            });
        }
        let base = 4 * k as u32;
        tunnel.server_tunnel_address = Some(tunnel_block.host(base + 1)?);
        tunnel.client_tunnel_address = Some(tunnel_block.host(base + 2)?);
    }

    topo.local_subnets = assignments;
    topo.node_addresses = addresses;
    topo.tunnel_block = Some(tunnel_block);
    topo.stand_alone_block = Some(stand_alone_block);
    Ok(())
}

/// Registers a client identity at the central point and returns the static
/// configuration bound to it: site routers announce their subnet,
/// stand-alone clients receive their fixed overlay address.
pub fn register_client(
    topo: &mut OverlayTopology,
    node: &NodeId,
    subject: &str,
) -> Result<ClientCredential, OverlayError> {
    if topo.credentials.contains_key(subject) {
        return Err(OverlayError::DuplicateSubject { subject: subject.to_string() });
    }
    let site = topo
        .node_sites
        .get(node)
        .ok_or_else(|| OverlayError::UnknownNode { node: node.clone() })?
        .clone();

    let addressed_from_pool = topo.stand_alone_clients.contains(node)
        || topo.loose_central_points.contains(node);
    let credential = if addressed_from_pool {
        ClientCredential {
            subject: subject.to_string(),
            node_id: node.clone(),
            static_subnet: None,
            static_address: topo.node_addresses.get(node).copied(),
        }
    } else {
        let subnet = topo
            .local_subnets
            .get(&site)
            .map(|s| s.prefix)
            .ok_or(OverlayError::UnassignedAddresses)?;
        ClientCredential {
            subject: subject.to_string(),
            node_id: node.clone(),
            static_subnet: Some(subnet),
            static_address: None,
        }
    };
    topo.credentials.insert(subject.to_string(), credential.clone());
    Ok(credential)
}

/// Derives every node's routing table from the topology:
/// workers default to their site gateway, routers default into their tunnel,
/// the central point routes each remote subnet through the matching tunnel
/// and keeps one host route per stand-alone client.
pub fn compute_routes(
    topo: &OverlayTopology,
) -> Result<BTreeMap<NodeId, Vec<RouteEntry>>, OverlayError> {
    if topo.local_subnets.is_empty() || topo.node_addresses.is_empty() {
        return Err(OverlayError::UnassignedAddresses);
    }
    let primary = topo.primary().clone();
    let mut tables: BTreeMap<NodeId, Vec<RouteEntry>> = BTreeMap::new();

    let active_tunnel = |client: &NodeId| -> Option<&Tunnel> {
        topo.tunnels
            .iter()
            .find(|t| &t.client_node == client && t.active)
    };

    for (node, site) in &topo.node_sites {
        let mut table = Vec::new();
        let role = topo.node_roles[node];
        match role {
            NodeRole::Worker | NodeRole::FrontEnd | NodeRole::CentralPoint => {
                let is_primary = node == &primary;
                if is_primary {
                    // Remote bridged subnets through their router's tunnel.
                    for (remote_site, subnet) in &topo.local_subnets {
                        if remote_site == site {
                            continue;
                        }
                        if let Some(vr) = topo.vrouters.get(remote_site) {
                            if let Some(t) = active_tunnel(vr) {
                                table.push(RouteEntry {
                                    target: RouteTarget::Net(subnet.prefix),
                                    next_hop: NextHop::Tunnel {
                                        peer: vr.clone(),
                                        endpoint: t
                                            .client_tunnel_address
                                            .ok_or(OverlayError::UnassignedAddresses)?,
                                    },
                                });
                            }
                        }
                    }
                    // Host routes for stand-alone clients and standby
                    // central points, each through its own tunnel.
                    let direct_peers = topo
                        .stand_alone_clients
                        .iter()
                        .chain(topo.central_points.iter().skip(1));
                    for client in direct_peers {
                        if let (Some(t), Some(addr)) =
                            (active_tunnel(client), topo.node_addresses.get(client))
                        {
                            table.push(RouteEntry {
                                target: RouteTarget::Host(*addr),
                                next_hop: NextHop::Tunnel {
                                    peer: client.clone(),
                                    endpoint: t
                                        .client_tunnel_address
                                        .ok_or(OverlayError::UnassignedAddresses)?,
                                },
                            });
                        }
                    }
                } else if role == NodeRole::CentralPoint {
                    // Standby central point: the whole overlay through its
                    // tunnel to the primary.
                    if let Some(t) = active_tunnel(node) {
                        let base = topo
                            .local_subnets
                            .values()
                            .next()
                            .map(|s| s.prefix)
                            .ok_or(OverlayError::UnassignedAddresses)?;
                        let overlay_wide = widest_base(topo).unwrap_or(base);
                        table.push(RouteEntry {
                            target: RouteTarget::Net(overlay_wide),
                            next_hop: NextHop::Tunnel {
                                peer: t.server_node.clone(),
                                endpoint: t
                                    .server_tunnel_address
                                    .ok_or(OverlayError::UnassignedAddresses)?,
                            },
                        });
                    }
                } else if !topo.stand_alone_clients.contains(node) {
                    // Plain LAN member: default through the site gateway —
                    // unless this node owns the gateway address itself.
                    if let Some(subnet) = topo.local_subnets.get(site) {
                        if topo.node_addresses.get(node)
                            != Some(&subnet.gateway_address)
                        {
                            table.push(RouteEntry {
                                target: RouteTarget::Default,
                                next_hop: NextHop::Gateway(subnet.gateway_address),
                            });
                        }
                    }
                }
            }
            NodeRole::Vrouter => {
                if let Some(t) = active_tunnel(node) {
                    table.push(RouteEntry {
                        target: RouteTarget::Default,
                        next_hop: NextHop::Tunnel {
                            peer: t.server_node.clone(),
                            endpoint: t
                                .server_tunnel_address
                                .ok_or(OverlayError::UnassignedAddresses)?,
                        },
                    });
                }
            }
            NodeRole::StandAloneClient => {}
        }

        if topo.stand_alone_clients.contains(node) {
            if let Some(t) = active_tunnel(node) {
                // Everything in the overlay goes through the central point.
                let base = topo
                    .local_subnets
                    .values()
                    .next()
                    .map(|s| s.prefix)
                    .ok_or(OverlayError::UnassignedAddresses)?;
                let overlay_wide = widest_base(topo).unwrap_or(base);
                table.push(RouteEntry {
                    target: RouteTarget::Net(overlay_wide),
                    next_hop: NextHop::Tunnel {
                        peer: t.server_node.clone(),
                        endpoint: t
                            .server_tunnel_address
                            .ok_or(OverlayError::UnassignedAddresses)?,
                    },
                });
            }
        }

        tables.insert(node.clone(), table);
    }
    Ok(tables)
}

/// The overlay-wide prefix: derived from the reserved blocks' common parent
/// recorded during assignment.
fn widest_base(topo: &OverlayTopology) -> Option<Ipv4Net> {
    let block = topo.tunnel_block?;
    // Reconstruct the base by masking the tunnel block down to the length it
    // was carved from. Site blocks are SITE_BLOCK_LEN wide and the base must
    // cover index capacity-2, so the base is at most SITE_BLOCK_LEN-2 bits...
    // Rather than guess, widen until all assigned subnets are covered.
    let mut len = SITE_BLOCK_LEN;
    loop {
        let candidate = Ipv4Net::new(block.addr(), len).ok()?;
        let covers_all = topo
            .local_subnets
            .values()
            .all(|s| candidate.contains(s.prefix.addr()))
            && topo
                .stand_alone_block
                .map(|b| candidate.contains(b.addr()))
                .unwrap_or(true);
        if covers_all {
            return Some(candidate);
        }
        if len == 0 {
            return None;
        }
        len -= 1;
    }
}

/// Traces the node-level path a packet takes from `src` to `dst`, both
/// inclusive. Fails with `Unreachable` when no route leads to the
/// destination.
pub fn trace_path(
    topo: &OverlayTopology,
    routes: &BTreeMap<NodeId, Vec<RouteEntry>>,
    src: &NodeId,
    dst: &NodeId,
) -> Result<Vec<NodeId>, OverlayError> {
    let unreachable = || OverlayError::Unreachable { src: src.clone(), dst: dst.clone() };
    let dst_addr = *topo.node_addresses.get(dst).ok_or_else(unreachable)?;
    if !topo.node_addresses.contains_key(src) {
        return Err(unreachable());
    }

    let node_by_address = |addr: Ipv4Addr| -> Option<&NodeId> {
        topo.node_addresses
            .iter()
            .find(|(_, a)| **a == addr)
            .map(|(n, _)| n)
    };

    let mut path = vec![src.clone()];
    let mut hop = src.clone();
    let limit = topo.node_sites.len() + 1;
    while hop != *dst {
        if path.len() > limit {
            return Err(unreachable());
        }
        // Same-LAN delivery: the destination is directly reachable.
        let hop_site = topo.node_sites.get(&hop).ok_or_else(unreachable)?;
        let on_local_lan = !topo.stand_alone_clients.contains(&hop)
            && topo
                .local_subnets
                .get(hop_site)
                .map(|s| s.prefix.contains(dst_addr))
                .unwrap_or(false)
            && !topo.stand_alone_clients.contains(dst);
        if on_local_lan {
            path.push(dst.clone());
            break;
        }

        let table = routes.get(&hop).ok_or_else(unreachable)?;
        let entry = best_match(table, dst_addr).ok_or_else(unreachable)?;
        let next = match &entry.next_hop {
            NextHop::Tunnel { peer, .. } => peer.clone(),
            NextHop::Gateway(addr) => {
                node_by_address(*addr).ok_or_else(unreachable)?.clone()
            }
        };
        if path.contains(&next) {
            return Err(unreachable());
        }
        path.push(next.clone());
        hop = next;
    }
    Ok(path)
}

/// Longest-prefix match: host routes beat subnet routes beat the default.
fn best_match(table: &[RouteEntry], addr: Ipv4Addr) -> Option<&RouteEntry> {
    table
        .iter()
        .filter_map(|entry| {
            let specificity = match entry.target {
                RouteTarget::Host(h) => (h == addr).then_some(33u8),
                RouteTarget::Net(net) => {
                    net.contains(addr).then_some(net.prefix_len() + 1)
                }
                RouteTarget::Default => Some(0),
            };
            specificity.map(|s| (s, entry))
        })
        .max_by_key(|(s, _)| *s)
        .map(|(_, e)| e)
}

/// Fails the given central point over to the next configured backup. The
/// failed node loses its central-point role and its tunnels; standby tunnels
/// toward the new primary become active.
pub fn fail_central_point(
    topo: &OverlayTopology,
    failed: &NodeId,
) -> Result<OverlayTopology, OverlayError> {
    if !topo.central_points.contains(failed) {
        return Err(OverlayError::UnknownNode { node: failed.clone() });
    }
    if topo.central_points.len() < 2 {
        return Err(OverlayError::NoBackupCentralPoint);
    }
    let mut next = topo.clone();
    next.central_points.retain(|cp| cp != failed);
    next.tunnels
        .retain(|t| &t.server_node != failed && &t.client_node != failed);
    next.credentials.retain(|_, c| &c.node_id != failed);
    if next.node_roles.get(failed) == Some(&NodeRole::CentralPoint) {
        // A dedicated backup node disappears entirely; a front-end keeps its
        // LAN presence and merely stops serving the overlay.
        next.node_roles.remove(failed);
        next.node_sites.remove(failed);
        next.node_addresses.remove(failed);
        next.loose_central_points.remove(failed);
    }
    next.activate_tunnels();
    Ok(next)
}

/// Encrypted transfer cost: payload seconds stretched by the cipher's
/// throughput factor, plus a per-hop latency penalty.
pub fn apply_cipher_profile(profile: &CipherProfile, payload_s: f64, hops: u32) -> f64 {
    payload_s / profile.throughput_factor + f64::from(hops) * profile.latency_penalty
}

/// Convenience pipeline: plan, assign, register every client and activate
/// tunnels, then derive routes.
pub fn build_overlay(
    sites: &[CloudSite],
    placement: &[NodePlacement],
    front_end_site: &SiteId,
    backup_cp_sites: &[SiteId],
    base_prefix: Ipv4Net,
    cipher: CipherProfile,
    pinned_subnets: &BTreeMap<SiteId, Ipv4Net>,
) -> Result<(OverlayTopology, BTreeMap<NodeId, Vec<RouteEntry>>), OverlayError> {
    let mut topo = plan_topology(sites, placement, front_end_site, backup_cp_sites)?;
    topo.cipher = cipher;
    topo.pinned_subnets = pinned_subnets.clone();
    assign_addresses(&mut topo, base_prefix)?;
    let clients: Vec<NodeId> = topo
        .vrouters
        .values()
        .cloned()
        .chain(topo.stand_alone_clients.iter().cloned())
        .chain(topo.central_points.iter().skip(1).cloned())
        .collect();
    for client in clients {
        register_client(&mut topo, &client, &format!("CN={client}"))?;
    }
    topo.activate_tunnels();
    let routes = compute_routes(&topo)?;
    Ok((topo, routes))
}

/// Stable JSON rendering of a planned overlay for the `plan-topology`
/// command.
#[derive(Debug, Serialize)]
pub struct TopologyReport {
    pub central_points: Vec<String>,
    pub vrouters: BTreeMap<String, String>,
    pub subnets: BTreeMap<String, String>,
    pub tunnels: Vec<TunnelReport>,
    pub routes: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Serialize)]
pub struct TunnelReport {
    pub client: String,
    pub server: String,
    pub client_address: String,
    pub server_address: String,
    pub active: bool,
}

impl TopologyReport {
    pub fn new(
        topo: &OverlayTopology,
        routes: &BTreeMap<NodeId, Vec<RouteEntry>>,
    ) -> Self {
        let fmt_addr =
            |a: &Option<Ipv4Addr>| a.map(|a| a.to_string()).unwrap_or_default();
        Self {
            central_points: topo.central_points.iter().map(|n| n.to_string()).collect(),
            vrouters: topo
                .vrouters
                .iter()
                .map(|(s, n)| (s.to_string(), n.to_string()))
                .collect(),
            subnets: topo
                .local_subnets
                .iter()
                .map(|(s, a)| (s.to_string(), a.prefix.to_string()))
                .collect(),
            tunnels: topo
                .tunnels
                .iter()
                .map(|t| TunnelReport {
                    client: t.client_node.to_string(),
                    server: t.server_node.to_string(),
                    client_address: fmt_addr(&t.client_tunnel_address),
                    server_address: fmt_addr(&t.server_tunnel_address),
                    active: t.active,
                })
                .collect(),
            routes: routes
                .iter()
                .map(|(node, table)| {
                    let rendered = table
                        .iter()
                        .map(|e| {
                            let target = match e.target {
                                RouteTarget::Default => "default".to_string(),
                                RouteTarget::Net(n) => n.to_string(),
                                RouteTarget::Host(h) => format!("{h}/32"),
                            };
                            let hop = match &e.next_hop {
                                NextHop::Gateway(a) => format!("via {a}"),
                                NextHop::Tunnel { peer, endpoint } => {
                                    format!("tunnel {peer} via {endpoint}")
                                }
                            };
                            format!("{target} {hop}")
                        })
                        .collect();
                    (node.to_string(), rendered)
                })
                .collect(),
        }
    }
}
