//! Deterministic discrete-event simulator for hybrid elastic virtual clusters.
//!
//! A virtual cluster spans an on-premises site and one or more public cloud
//! sites, joined by a star-shaped overlay VPN. The library models the full
//! stack needed to reproduce the operational dynamics of such a deployment:
//!
//! * [`domain`] — sites, templates, jobs, node lifecycle and scenario files.
//! * [`overlay`] — overlay topology planning, subnet assignment, routing and
//!   central-point failover.
//! * [`orchestrator`] — site ranking and the serialized update workflow that
//!   provisions and removes nodes.
//! * [`elasticity`] — the queue-driven power management policy.
//! * [`sim`] — the event engine, batch-queue model, metrics and cost
//!   accounting.
//! * [`cli`] — the `vcsim` command-line front end.
//!
//! Runs are deterministic: the same scenario and seed always produce the same
//! event log, byte for byte.

pub mod cli;
pub mod domain;
pub mod elasticity;
pub mod net;
pub mod orchestrator;
pub mod overlay;
pub mod sim;
