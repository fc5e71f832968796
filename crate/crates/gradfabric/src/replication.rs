//! Keep a lagging replica within a divergence budget of the server.
//!
//! The server applies updates with momentum, so once it runs ahead of the
//! replica by m updates the models differ by at most a weighted sum of the
//! pending update norms plus an echo of the replica's last momentum step.
//! [`DivergenceLedger`] tracks exactly the quantities that weighted sum
//! needs; [`plan_replication`] ships the oldest updates the budget forces
//! out, coalesces the rest into combined updates that go only once a group
//! fills up, punts the surplus to the next batch, and when the budget would
//! still burst, holds back just the last server update until the replica has
//! caught up far enough.

use std::collections::BTreeMap;

use crate::aggregation::{aggregate_size, AggregationPlan, AGGREGATE_ID_BASE};
use crate::netstate::{NetworkState, NodeId, TransferSchedule};
use crate::ordering::UpdateRequest;
use crate::{Error, Result, TIME_EPS};

/// Schedule ids for replica-bound combined updates, clear of the server
/// plane's own aggregate ids.
const BLOB_ID_BASE: u64 = AGGREGATE_ID_BASE | (1 << 62);

/// Server/replica commit bookkeeping for one replica.
///
/// The replica applies the server's update sequence in the server's order,
/// so its committed set is always a prefix of the server's. `history_norm`
/// bounds the replica's last momentum step ‖w − w_prev‖.
#[derive(Debug, Clone)]
pub struct DivergenceLedger {
    gamma: f64,
    history_norm: f64,
    server_committed: Vec<(u64, f64)>,
    replica_len: usize,
}

impl DivergenceLedger {
    pub fn new(gamma: f64) -> Result<Self> {
        Self::with_history(gamma, 0.0)
    }

    /// Start from a nonzero momentum bound (both models warm).
    pub fn with_history(gamma: f64, history_norm: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("momentum {gamma} outside [0, 1)")));
        }
        if !history_norm.is_finite() || history_norm < 0.0 {
            return Err(Error::Config(format!("history norm {history_norm} invalid")));
        }
        Ok(DivergenceLedger { gamma, history_norm, server_committed: Vec::new(), replica_len: 0 })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn history_norm(&self) -> f64 {
        self.history_norm
    }

    pub fn commit_server(&mut self, id: u64, norm: f64) -> Result<()> {
        if !norm.is_finite() || norm < 0.0 {
            return Err(Error::Config(format!("update {id} has invalid norm {norm}")));
        }
        self.server_committed.push((id, norm));
        Ok(())
    }

    /// Apply the next pending update at the replica. Commits must follow the
    /// server's order, so `id` has to be the oldest pending update.
    pub fn commit_replica(&mut self, id: u64) -> Result<()> {
        match self.server_committed.get(self.replica_len) {
            Some((next, norm)) if *next == id => {
                self.history_norm = self.gamma * self.history_norm + norm;
                self.replica_len += 1;
                Ok(())
            }
            Some((next, _)) => Err(Error::Config(format!(
                "replica commit {id} out of order: update {next} is next"
            ))),
            None => Err(Error::Config(format!("replica commit {id} has no server commit"))),
        }
    }

    /// Updates the server has committed and the replica has not, oldest first.
    pub fn pending(&self) -> &[(u64, f64)] {
        &self.server_committed[self.replica_len..]
    }

    /// How many updates the server is ahead by.
    pub fn lead(&self) -> usize {
        self.server_committed.len() - self.replica_len
    }
}

/// Worst-case ‖w_server − w_replica‖₂ given the ledger's pending updates.
///
/// Each pending update u_i (i = 1 oldest of m) reaches the server's model
/// once directly and again through every later momentum step, contributing
/// Σ_{j=0..m−i} γ^j ‖u_i‖; the replica's own last step echoes with weight
/// Σ_{j=1..m} γ^j. With m = 0 the models agree and the bound is zero.
pub fn divergence_bound(ledger: &DivergenceLedger) -> f64 {
    let gamma = ledger.gamma;
    let mut geo = 0.0; // running Σ_{j=0..k} γ^j
    let mut pow = 1.0;
    let mut total = 0.0;
    for (_, norm) in ledger.pending().iter().rev() {
        geo += pow;
        pow *= gamma;
        total += geo * norm;
    }
    total + gamma * geo * ledger.history_norm
}

/// Concrete replica decisions for one batch.
#[derive(Debug, Clone)]
pub struct ReplicationPlan {
    /// Replica transfers booked for this batch: budget-forced direct sends
    /// plus the worker legs and combined update of every shipped group.
    pub frozen: Vec<TransferSchedule>,
    /// Replica commit instants for the shipped prefix, in commit order.
    pub frozen_commits: Vec<(u64, f64)>,
    /// Updates left for the next batch's replication round, in order.
    pub punted: Vec<u64>,
    /// Set when the divergence budget required holding back the final server
    /// update: (update id, new transfer start).
    pub delayed_server_update: Option<(u64, f64)>,
    /// Divergence bound at the batch's commit horizon after these decisions.
    pub bound_at_horizon: f64,
    /// Bytes the frozen transfers move.
    pub frozen_bytes: f64,
}

/// One replica-bound group under construction: worker legs feed `agg`, whose
/// combined update then travels on to the replica.
struct GroupBuild {
    state: NetworkState,
    inbound: Vec<TransferSchedule>,
    blob: TransferSchedule,
    /// Closed by the horizon test rather than by running out of updates.
    full: bool,
}

/// Fill one group on `agg` from the front of `rest`: updates join in order
/// while the group's combined update would still reach `replica` by
/// `horizon`. `None` when not even the first member makes it.
fn fill_group(
    state: &NetworkState,
    rest: &[&UpdateRequest],
    agg: NodeId,
    replica: NodeId,
    horizon: f64,
    blob_id: u64,
) -> Option<GroupBuild> {
    let mut st = state.clone();
    let mut members: Vec<&UpdateRequest> = Vec::new();
    let mut inbound: Vec<TransferSchedule> = Vec::new();
    let mut blob: Option<TransferSchedule> = None;
    let mut ready = 0.0f64;
    let mut full = false;
    for u in rest {
        let leg = match st.transfer_end_time(u.id, u.size, u.worker, agg, u.t_avail) {
            Ok(s) => s,
            Err(_) => {
                full = true;
                break;
            }
        };
        let with_leg = st.reserve(&leg).expect("leg was computed on this state");
        members.push(u);
        let next_ready = ready.max(leg.t_en);
        let candidate =
            with_leg.transfer_end_time(blob_id, aggregate_size(&members), agg, replica, next_ready);
        match candidate {
            Ok(b) if b.t_en <= horizon + TIME_EPS => {
                st = with_leg;
                ready = next_ready;
                inbound.push(leg);
                blob = Some(b);
            }
            _ => {
                members.pop();
                full = true;
                break;
            }
        }
    }
    let blob = blob?;
    let state = st.reserve(&blob).expect("blob was computed on this state");
    Some(GroupBuild { state, inbound, blob, full })
}

/// Decide the batch's replica traffic.
///
/// Pending updates replicate in the server's commit order, previously punted
/// ones (`carried`) first, over whatever bandwidth the server's schedules
/// left behind. The budget sets how many of the oldest have to be at the
/// replica by this batch's horizon; those ship unconditionally — coalesced
/// behind one of the replica's own aggregators when a full group still makes
/// the horizon, direct otherwise. The remainder ships lazily: a group that
/// fills up (closed by the horizon test, not by running out of updates) goes
/// out, everything else is punted so later batches can coalesce it further.
/// When a budget-forced send lands past the horizon, the final server update
/// is held back until the replica commit that restores the budget.
///
/// The ledger must already hold this batch's server commits, with exactly
/// `carried` plus the batch order pending.
#[allow(clippy::too_many_arguments)]
pub fn plan_replication(
    batch_plan: &AggregationPlan,
    updates: &[UpdateRequest],
    carried: &[UpdateRequest],
    nw_after_server: &NetworkState,
    replica: NodeId,
    replica_aggregators: &[NodeId],
    div_max: f64,
    ledger: &DivergenceLedger,
) -> Result<ReplicationPlan> {
    if div_max < 0.0 || div_max.is_nan() {
        return Err(Error::Config(format!("divergence budget {div_max} invalid")));
    }
    let order: Vec<u64> = carried
        .iter()
        .map(|u| u.id)
        .chain(batch_plan.order.iter().copied())
        .collect();
    let pending_ids: Vec<u64> = ledger.pending().iter().map(|(id, _)| *id).collect();
    if pending_ids != order {
        return Err(Error::Config(format!(
            "ledger pending {pending_ids:?} does not match replication order {order:?}"
        )));
    }
    let pool: Vec<&UpdateRequest> = order
        .iter()
        .map(|id| {
            carried
                .iter()
                .chain(updates.iter())
                .find(|u| u.id == *id)
                .ok_or_else(|| Error::Config(format!("update {id} missing from batch/carryover")))
        })
        .collect::<Result<_>>()?;
    let t_last = batch_plan.total_time;

    // How many of the oldest pending updates the budget forces out at this
    // horizon. Draining everything empties the pending set and zeroes the
    // bound, so `need` never runs past the pool.
    let mut scratch = ledger.clone();
    let mut need = 0usize;
    while divergence_bound(&scratch) > div_max {
        scratch.commit_replica(order[need])?;
        need += 1;
    }

    // Build the shipped prefix: full groups coalesce, forced stragglers go
    // direct for the fastest catch-up, the rest waits.
    let mut state = nw_after_server.clone();
    let mut frozen: Vec<TransferSchedule> = Vec::new();
    let mut lands: Vec<f64> = Vec::new();
    let mut bytes = 0.0;
    let mut groups = 0u64;
    let mut groups_open = !replica_aggregators.is_empty();
    while lands.len() < pool.len() {
        let at = lands.len();
        if groups_open {
            let taken = (0..replica_aggregators.len()).find_map(|probe| {
                let agg =
                    replica_aggregators[(groups as usize + probe) % replica_aggregators.len()];
                fill_group(&state, &pool[at..], agg, replica, t_last, BLOB_ID_BASE + groups)
                    .filter(|g| g.full && g.inbound.len() >= 2)
            });
            match taken {
                Some(g) => {
                    for s in g.inbound.iter().chain(std::iter::once(&g.blob)) {
                        bytes += s.rate_profile.integral(s.t_st, s.t_en);
                    }
                    lands.extend(std::iter::repeat(g.blob.t_en).take(g.inbound.len()));
                    frozen.extend(g.inbound);
                    frozen.push(g.blob);
                    state = g.state;
                    groups += 1;
                    continue;
                }
                // capacity only shrinks and updates only get younger along
                // the pool, so once no full group forms none will
                None => groups_open = false,
            }
        }
        if at >= need {
            break;
        }
        let u = pool[at];
        let s = state.transfer_end_time(u.id, u.size, u.worker, replica, u.t_avail).map_err(
            |e| Error::BoundUnattainable {
                div_max,
                detail: format!("update {} cannot reach the replica: {e}", u.id),
            },
        )?;
        state = state.reserve(&s)?;
        bytes += s.rate_profile.integral(s.t_st, s.t_en);
        lands.push(s.t_en);
        frozen.push(s);
    }
    let ship_len = lands.len();

    // Replica commit instants: no earlier than the server's commit of the
    // same update, and never out of the replication order.
    let server_commit: BTreeMap<u64, f64> = batch_plan.commit_times().into_iter().collect();
    let mut commits: Vec<(u64, f64)> = Vec::with_capacity(ship_len);
    let mut gate = 0.0f64;
    for (i, u) in pool[..ship_len].iter().enumerate() {
        gate = gate.max(lands[i]).max(server_commit.get(&u.id).copied().unwrap_or(0.0));
        commits.push((u.id, gate));
    }

    let mut scratch = ledger.clone();
    for (id, _) in &commits {
        scratch.commit_replica(*id)?;
    }
    let bound = divergence_bound(&scratch);
    debug_assert!(bound <= div_max + TIME_EPS, "shipping the forced prefix restores the budget");

    // Only budget-forced sends may land past the horizon (anything optional
    // shipped exactly because it made it), so when one does, the server's
    // final update waits for the commit that restores the budget.
    let delayed = match commits.last() {
        Some(c) if c.1 > t_last + TIME_EPS => {
            let catch_up = commits[need - 1].1;
            let last_id = *batch_plan.order.last().expect("batch order nonempty");
            Some((last_id, catch_up))
        }
        _ => None,
    };

    Ok(ReplicationPlan {
        frozen,
        frozen_commits: commits,
        punted: order[ship_len..].to_vec(),
        delayed_server_update: delayed,
        bound_at_horizon: bound,
        frozen_bytes: bytes,
    })
}
