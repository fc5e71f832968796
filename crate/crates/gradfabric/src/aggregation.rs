//! Partition an ordered batch into a direct prefix plus aggregator groups so
//! the server NIC is never left fallow, and the reverse problem: fanning a
//! model out to workers through distributor nodes.
//!
//! The planner enumerates how many updates go straight to the server (n = 0
//! to |batch|). For each n the remaining updates fill aggregator groups
//! greedily: an update joins the current group while its worker-to-aggregator
//! transfer finishes before the server is done receiving everything reserved
//! so far (`t_max`); on violation the group's combined update is booked to
//! the server, `t_max` advances, and the next aggregator opens. The cheapest
//! of the |batch|+1 resulting plans wins.

use std::collections::BTreeMap;

use crate::netstate::{NetworkState, NodeId, TransferSchedule};
use crate::ordering::{OrderedBatch, UpdateRequest};
use crate::{Error, Result, TIME_EPS};

/// Synthetic schedule ids for combined (aggregated) updates: base + aid.
pub const AGGREGATE_ID_BASE: u64 = 1 << 63;

/// Bytes of the combined update for a group: members are dense same-shape
/// vectors, so their sum is as large as the largest member, never the total.
pub fn aggregate_size(members: &[&UpdateRequest]) -> f64 {
    members.iter().fold(0.0f64, |m, u| m.max(u.size))
}

/// Transfers belonging to one aggregator group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSchedules {
    pub aggregator: NodeId,
    /// Worker→aggregator legs in batch order (distributor→worker legs for a
    /// distribution plan).
    pub inbound: Vec<TransferSchedule>,
    /// Aggregator→server leg (server→distributor for a distribution plan).
    pub aggregate: TransferSchedule,
}

/// One evaluated aggregation pattern.
#[derive(Debug, Clone)]
pub struct AggregationPlan {
    /// Batch order the plan was built over (committed updates only).
    pub order: Vec<u64>,
    /// Update id → group id; 0 means direct to the server.
    pub assignment: BTreeMap<u64, u32>,
    pub aggregator_nodes: BTreeMap<u32, NodeId>,
    /// Direct-to-server schedules for the first `n_direct` updates, in order.
    pub direct: Vec<TransferSchedule>,
    pub groups: Vec<GroupSchedules>,
    pub n_direct: usize,
    /// When the last byte of the batch reaches the server; +infinity marks an
    /// infeasible pattern (it needed more aggregators than exist).
    pub total_time: f64,
    /// Network state with every transfer of this plan reserved.
    pub nw_after: NetworkState,
}

impl AggregationPlan {
    /// Server commit instants in batch order. A direct update lands at its
    /// own transfer end, an aggregated one when its group's combined update
    /// lands; commits are gated to happen in batch order (prefix max).
    pub fn commit_times(&self) -> Vec<(u64, f64)> {
        let group_end: BTreeMap<u32, f64> = self
            .groups
            .iter()
            .enumerate()
            .map(|(i, g)| (i as u32 + 1, g.aggregate.t_en))
            .collect();
        let mut direct_iter = self.direct.iter();
        let mut out = Vec::with_capacity(self.order.len());
        let mut horizon = 0.0f64;
        for id in &self.order {
            let t = match self.assignment[id] {
                0 => direct_iter.next().expect("direct schedule per direct update").t_en,
                aid => group_end[&aid],
            };
            horizon = horizon.max(t);
            out.push((*id, horizon));
        }
        out
    }
}

fn lookup<'a>(
    ordered: &OrderedBatch,
    updates: &'a [UpdateRequest],
) -> Result<Vec<&'a UpdateRequest>> {
    ordered
        .order
        .iter()
        .map(|id| {
            updates
                .iter()
                .find(|u| u.id == *id)
                .ok_or_else(|| Error::Config(format!("ordered id {id} missing from batch")))
        })
        .collect()
}

/// Evaluate the aggregation pattern with the first `n` updates sent directly.
///
/// Transfer failures while filling groups (an aggregator with no bandwidth,
/// or more groups needed than aggregators available) mark the pattern
/// infeasible (`total_time = +inf`) rather than erroring: the enumeration in
/// [`plan_aggregation`] simply passes over such patterns.
pub fn det_agg(
    n: usize,
    ordered: &OrderedBatch,
    updates: &[UpdateRequest],
    nw: &NetworkState,
    server: NodeId,
    aggregators: &[NodeId],
) -> Result<AggregationPlan> {
    let members = lookup(ordered, updates)?;
    assert!(n <= members.len());
    let mut plan = AggregationPlan {
        order: ordered.order.clone(),
        assignment: BTreeMap::new(),
        aggregator_nodes: BTreeMap::new(),
        direct: Vec::with_capacity(n),
        groups: Vec::new(),
        n_direct: n,
        total_time: f64::INFINITY,
        nw_after: nw.clone(),
    };
    let mut state = nw.clone();
    // Time until the server is busy receiving what is booked so far. `None`
    // until the first server-bound transfer exists: with n = 0 the first
    // group has nothing to hide behind, so it fills without the time test.
    let mut t_max: Option<f64> = None;
    for u in &members[..n] {
        let s = state.transfer_end_time(u.id, u.size, u.worker, server, u.t_avail)?;
        state = state.reserve(&s)?;
        t_max = Some(s.t_en);
        plan.assignment.insert(u.id, 0);
        plan.direct.push(s);
    }

    let infeasible = |mut plan: AggregationPlan| {
        plan.total_time = f64::INFINITY;
        Ok(plan)
    };

    let mut aid = 0usize; // 1-based once a group opens
    let mut group: Vec<(&UpdateRequest, TransferSchedule)> = Vec::new();
    let mut last_end = plan.direct.last().map(|s| s.t_en).unwrap_or(0.0);
    let mut i = n;
    while i < members.len() {
        if aid == 0 {
            if aggregators.is_empty() {
                return infeasible(plan);
            }
            aid = 1;
        }
        let u = members[i];
        let node = aggregators[aid - 1];
        let candidate = state.transfer_end_time(u.id, u.size, u.worker, node, u.t_avail);
        let fits = match (&candidate, t_max) {
            (Ok(s), Some(tm)) => s.t_en <= tm + TIME_EPS,
            (Ok(_), None) => true, // no server-bound transfer to outlast yet
            (Err(_), _) => false,
        };
        if fits {
            let s = candidate.unwrap();
            state = state.reserve(&s)?;
            group.push((u, s));
            i += 1;
            continue;
        }
        // Close the current group (if it has members) and retry this update
        // against the next aggregator.
        if !group.is_empty() {
            match close_group(&state, server, node, aid, &group) {
                Ok((s, next_state)) => {
                    state = next_state;
                    t_max = Some(s.t_en);
                    last_end = last_end.max(s.t_en);
                    // group numbers stay contiguous even when an aggregator
                    // slot is skipped without taking a single member
                    let gid = plan.groups.len() as u32 + 1;
                    plan.aggregator_nodes.insert(gid, node);
                    for (u, _) in &group {
                        plan.assignment.insert(u.id, gid);
                    }
                    plan.groups.push(GroupSchedules {
                        aggregator: node,
                        inbound: group.drain(..).map(|(_, s)| s).collect(),
                        aggregate: s,
                    });
                }
                Err(_) => return infeasible(plan),
            }
        }
        if aid == aggregators.len() {
            return infeasible(plan);
        }
        aid += 1;
    }
    if !group.is_empty() {
        let node = aggregators[aid - 1];
        match close_group(&state, server, node, aid, &group) {
            Ok((s, next_state)) => {
                state = next_state;
                last_end = last_end.max(s.t_en);
                let gid = plan.groups.len() as u32 + 1;
                plan.aggregator_nodes.insert(gid, node);
                for (u, _) in &group {
                    plan.assignment.insert(u.id, gid);
                }
                plan.groups.push(GroupSchedules {
                    aggregator: node,
                    inbound: group.drain(..).map(|(_, s)| s).collect(),
                    aggregate: s,
                });
            }
            Err(_) => return infeasible(plan),
        }
    }
    plan.total_time = last_end;
    plan.nw_after = state;
    Ok(plan)
}

/// Book the group's combined update toward the server; it becomes available
/// once the last member has fully arrived at the aggregator.
fn close_group(
    state: &NetworkState,
    server: NodeId,
    node: NodeId,
    aid: usize,
    group: &[(&UpdateRequest, TransferSchedule)],
) -> Result<(TransferSchedule, NetworkState)> {
    let members: Vec<&UpdateRequest> = group.iter().map(|(u, _)| *u).collect();
    let size = aggregate_size(&members);
    let ready = group.iter().fold(0.0f64, |m, (_, s)| m.max(s.t_en));
    let sched =
        state.transfer_end_time(AGGREGATE_ID_BASE + aid as u64, size, node, server, ready)?;
    let next = state.reserve(&sched)?;
    Ok((sched, next))
}

/// Try every direct-prefix length and keep the fastest pattern. Exact ties
/// prefer more direct transfers (fewer moving parts). The all-direct pattern
/// (n = |batch|) needs no aggregators, so a best plan always exists.
pub fn plan_aggregation(
    ordered: &OrderedBatch,
    updates: &[UpdateRequest],
    nw: &NetworkState,
    server: NodeId,
    aggregators: &[NodeId],
) -> Result<AggregationPlan> {
    if ordered.order.is_empty() {
        return Err(Error::Config("nothing to aggregate: empty order".into()));
    }
    let mut best: Option<AggregationPlan> = None;
    for n in 0..=ordered.order.len() {
        let plan = det_agg(n, ordered, updates, nw, server, aggregators)?;
        let better = match &best {
            None => plan.total_time.is_finite(),
            Some(b) => plan.total_time < b.total_time - TIME_EPS
                || (plan.total_time <= b.total_time + TIME_EPS && plan.n_direct > b.n_direct),
        };
        if better {
            best = Some(plan);
        }
    }
    best.ok_or_else(|| Error::Unschedulable("no feasible aggregation pattern".into()))
}

/// Plan the reverse tree: ship one model copy to each distributor and let
/// distributors fan out to their group's workers, while the first group is
/// served straight from the server.
///
/// Requests are `(worker, model_bytes)` pairs; the returned plan reuses the
/// aggregation vocabulary with directions flipped: `direct` holds
/// server→worker sends, a group's `aggregate` is the server→distributor copy
/// and its `inbound` are distributor→worker sends. `total_time` is the last
/// worker receipt. Copies go out deepest-group-first so every tree is
/// streaming while the server serves the direct group last.
pub fn plan_distribution(
    requests: &[(NodeId, f64)],
    nw: &NetworkState,
    server: NodeId,
    distributors: &[NodeId],
) -> Result<AggregationPlan> {
    if requests.is_empty() {
        return Err(Error::Config("no model requests".into()));
    }
    let mut best: Option<AggregationPlan> = None;
    for n in 0..=requests.len() {
        if let Some(plan) = distribution_pattern(n, requests, nw, server, distributors)? {
            let better = match &best {
                None => true,
                Some(b) => plan.total_time < b.total_time - TIME_EPS
                    || (plan.total_time <= b.total_time + TIME_EPS && plan.n_direct > b.n_direct),
            };
            if better {
                best = Some(plan);
            }
        }
    }
    best.ok_or_else(|| Error::Unschedulable("no feasible distribution pattern".into()))
}

/// One distribution pattern: partition greedily exactly like [`det_agg`]
/// (with server→worker, distributor→worker, and server→distributor legs),
/// then rebuild the real schedule backwards. `None` marks an infeasible n.
fn distribution_pattern(
    n: usize,
    requests: &[(NodeId, f64)],
    nw: &NetworkState,
    server: NodeId,
    distributors: &[NodeId],
) -> Result<Option<AggregationPlan>> {
    let model_size = requests.iter().fold(0.0f64, |m, (_, s)| m.max(*s));
    // partition phase on a scratch state
    let mut scratch = nw.clone();
    let mut t_max: Option<f64> = None;
    let mut groups: Vec<Vec<usize>> = Vec::new(); // request indices per group
    for (i, (w, size)) in requests.iter().enumerate().take(n) {
        let s = scratch.transfer_end_time(i as u64, *size, server, *w, 0.0)?;
        scratch = scratch.reserve(&s)?;
        t_max = Some(s.t_en);
    }
    let mut aid = 0usize;
    let mut i = n;
    while i < requests.len() {
        if aid == 0 {
            if distributors.is_empty() {
                return Ok(None);
            }
            aid = 1;
            groups.push(Vec::new());
        }
        let (w, size) = requests[i];
        let node = distributors[aid - 1];
        let candidate = scratch.transfer_end_time(i as u64, size, node, w, 0.0);
        let fits = match (&candidate, t_max) {
            (Ok(s), Some(tm)) => s.t_en <= tm + TIME_EPS,
            (Ok(_), None) => true,
            (Err(_), _) => false,
        };
        if fits {
            let s = candidate.unwrap();
            scratch = scratch.reserve(&s)?;
            groups.last_mut().unwrap().push(i);
            i += 1;
            continue;
        }
        if !groups.last().unwrap().is_empty() {
            match scratch.transfer_end_time(AGGREGATE_ID_BASE + aid as u64, model_size, server, node, 0.0)
            {
                Ok(s) => {
                    scratch = scratch.reserve(&s)?;
                    t_max = Some(s.t_en);
                }
                Err(_) => return Ok(None),
            }
        }
        if aid == distributors.len() {
            return Ok(None);
        }
        aid += 1;
        groups.push(Vec::new());
    }
    groups.retain(|g| !g.is_empty());

    // schedule phase: copies to distributors deepest-first, then the direct
    // group, then each distributor fans out as soon as its copy lands
    let mut state = nw.clone();
    let mut plan = AggregationPlan {
        order: (0..requests.len() as u64).collect(),
        assignment: BTreeMap::new(),
        aggregator_nodes: BTreeMap::new(),
        direct: Vec::new(),
        groups: Vec::new(),
        n_direct: n,
        total_time: 0.0,
        nw_after: nw.clone(),
    };
    let mut copies: Vec<TransferSchedule> = Vec::new();
    for (gi, _) in groups.iter().enumerate().rev() {
        let node = distributors[gi];
        match state.transfer_end_time(AGGREGATE_ID_BASE + gi as u64 + 1, model_size, server, node, 0.0) {
            Ok(s) => {
                state = state.reserve(&s)?;
                copies.push(s);
            }
            Err(_) => return Ok(None),
        }
    }
    copies.reverse(); // back to group order
    let mut last = 0.0f64;
    for (i, (w, size)) in requests.iter().enumerate().take(n) {
        let s = state.transfer_end_time(i as u64, *size, server, *w, 0.0)?;
        state = state.reserve(&s)?;
        last = last.max(s.t_en);
        plan.assignment.insert(i as u64, 0);
        plan.direct.push(s);
    }
    for (gi, group) in groups.iter().enumerate() {
        let node = distributors[gi];
        let copy = &copies[gi];
        let mut inbound = Vec::new();
        for &ri in group {
            let (w, size) = requests[ri];
            match state.transfer_end_time(ri as u64, size, node, w, copy.t_en) {
                Ok(s) => {
                    state = state.reserve(&s)?;
                    last = last.max(s.t_en);
                    plan.assignment.insert(ri as u64, gi as u32 + 1);
                    inbound.push(s);
                }
                Err(_) => return Ok(None),
            }
        }
        plan.aggregator_nodes.insert(gi as u32 + 1, node);
        plan.groups.push(GroupSchedules {
            aggregator: node,
            inbound,
            aggregate: copy.clone(),
        });
    }
    plan.total_time = last;
    plan.nw_after = state;
    Ok(Some(plan))
}
