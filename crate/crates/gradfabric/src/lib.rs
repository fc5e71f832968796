//! Network-aware communication control plane for distributed SGD.
//!
//! The library plans every model-update transfer in a parameter-server style
//! cluster: it orders pending updates so that no committed update is staler
//! than a configurable delay bound, opportunistically routes groups of updates
//! through aggregator nodes to keep the server NIC saturated, and schedules
//! replica traffic so that the server and its replica never drift apart by
//! more than a divergence budget. Everything is planned against an explicit
//! time-expanded view of the network ([`netstate`]) and validated by a
//! discrete-event simulator ([`simlab`]), a brute-force planning oracle
//! ([`oracle`]), and a convex-SGD convergence lab.
//!
//! All planning operations are pure: they take value state in and return new
//! state, so identical inputs always produce bit-identical plans.

pub mod aggregation;
pub mod cli;
pub mod config;
pub mod metrics;
pub mod netstate;
pub mod oracle;
pub mod ordering;
pub mod replication;
pub mod rng;
pub mod simlab;

use thiserror::Error;

/// Times within this many seconds are considered equal; ties between equal
/// transfer end times are broken by lower update id.
pub const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum Error {
    /// Scenario or topology configuration is unusable.
    #[error("configuration error: {0}")]
    Config(String),

    /// No path residual can ever deliver the requested bytes.
    #[error("unschedulable transfer: {0}")]
    Unschedulable(String),

    /// A reservation asked for more bandwidth than a link has left. This is a
    /// bug when the schedule came from `transfer_end_time` on the same state.
    #[error("over-reservation on link {link}: {detail}")]
    OverReservation { link: String, detail: String },

    /// The divergence budget cannot be met even by delaying the last server
    /// update; the caller must fall back to fully synchronous replication
    /// (drain the entire replica schedule before the last server commit).
    #[error("divergence budget {div_max} unattainable: {detail}; replicate synchronously (drain the full replica prefix before the last server commit)")]
    BoundUnattainable { div_max: f64, detail: String },

    /// Exhaustive search was asked for an instance above its size cap.
    #[error("instance too large for exhaustive search: {0}")]
    OracleCap(String),

    /// Reading a scenario or writing an artifact failed.
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
