//! Per-batch transfer ordering: shortest-transfer-first, bent where needed by
//! per-update deadlines, with a one-step look-ahead that drops updates whose
//! transfer would stall the commit pipeline.
//!
//! Commit order at the server equals the planned order, so an update
//! committed at 1-based position `p` lands on model version `v_init + p - 1`
//! and carries delay `(p - 1) + (v_init - v(g))`. The deadline
//! `dl(g) = v(g) + tau_max - v_init` is therefore the last position at which
//! `g` can still commit inside the delay bound; updates that cannot make any
//! feasible position are dropped at the worker instead of poisoning the
//! batch.

use std::collections::{BTreeMap, BTreeSet};

use crate::netstate::{earlier, NetworkState, NodeId, TransferSchedule};
use crate::{Error, Result, TIME_EPS};

/// One worker gradient push.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRequest {
    pub id: u64,
    pub worker: NodeId,
    /// Total bytes. For multi-server updates this is the sum over components.
    pub size: f64,
    /// Model version the gradient was computed against.
    pub version: u64,
    /// ℓ2 norm reported at push time, used only for divergence accounting.
    pub norm: f64,
    pub t_avail: f64,
    /// Per-server shards `(server, bytes)` when the model is sharded. All
    /// components share the update's version and therefore its deadline.
    pub components: Option<Vec<(NodeId, f64)>>,
}

impl UpdateRequest {
    pub fn new(id: u64, worker: NodeId, size: f64, version: u64, norm: f64, t_avail: f64) -> Self {
        UpdateRequest {
            id,
            worker,
            size,
            version,
            norm,
            t_avail,
            components: None,
        }
    }
}

/// Why an update was shed from the batch.
#[derive(Debug, Clone, PartialEq)]
pub enum DropReason {
    /// No remaining commit position satisfies the delay bound.
    Expired { dl: i64, position: usize },
    /// Committing it would have finished after the next pick's transfer,
    /// stalling every later commit.
    LookAhead { t_en_dropped: f64, t_en_next: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropEvent {
    pub id: u64,
    pub reason: DropReason,
}

/// The planned batch: commit order, drops, and one reserved schedule per
/// component of each committed update.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedBatch {
    pub order: Vec<u64>,
    pub dropped: BTreeSet<u64>,
    pub schedules: BTreeMap<u64, Vec<TransferSchedule>>,
    pub v_init: u64,
    pub drop_log: Vec<DropEvent>,
}

impl OrderedBatch {
    /// Transfer end time of a committed update: latest component end.
    pub fn t_en(&self, id: u64) -> Option<f64> {
        self.schedules
            .get(&id)
            .map(|v| v.iter().fold(0.0f64, |m, s| m.max(s.t_en)))
    }
}

/// Latest 1-based commit position at which `u` still meets the delay bound.
/// May be ≤ 0 for updates that already expired in the queue.
pub fn deadline(u: &UpdateRequest, tau_max: u32, v_init: u64) -> i64 {
    u.version as i64 + tau_max as i64 - v_init as i64
}

/// Resolve the component list of an update against the server list.
fn components_of(u: &UpdateRequest, servers: &[NodeId]) -> Result<Vec<(NodeId, f64)>> {
    match (&u.components, servers.len()) {
        (None, 1) => Ok(vec![(servers[0], u.size)]),
        (None, n) => Err(Error::Config(format!(
            "update {} has no components but {n} servers are configured",
            u.id
        ))),
        (Some(c), _) => {
            if c.len() != servers.len() || c.iter().zip(servers).any(|((s, _), e)| s != e) {
                return Err(Error::Config(format!(
                    "update {} components must cover each server exactly once",
                    u.id
                )));
            }
            Ok(c.clone())
        }
    }
}

/// Plan every component of `u` against `nw`, reserving components in server
/// order so shards sharing a link (the worker uplink, typically) queue behind
/// each other instead of double-booking it. Returns the schedules and the
/// update's end time (latest component end).
fn eval_update(
    u: &UpdateRequest,
    nw: &NetworkState,
    servers: &[NodeId],
) -> Result<(f64, Vec<TransferSchedule>)> {
    let comps = components_of(u, servers)?;
    if comps.len() == 1 {
        let s = nw.transfer_end_time(u.id, comps[0].1, u.worker, comps[0].0, u.t_avail)?;
        return Ok((s.t_en, vec![s]));
    }
    let mut scratch = nw.clone();
    let mut t_en = 0.0f64;
    let mut scheds = Vec::with_capacity(comps.len());
    for (server, bytes) in comps {
        let s = scratch.transfer_end_time(u.id, bytes, u.worker, server, u.t_avail)?;
        scratch = scratch.reserve(&s)?;
        t_en = t_en.max(s.t_en);
        scheds.push(s);
    }
    Ok((t_en, scheds))
}

/// Reserve all components of a planned update atomically.
fn reserve_all(nw: &NetworkState, scheds: &[TransferSchedule]) -> Result<NetworkState> {
    let mut next = nw.clone();
    for s in scheds {
        next = next.reserve(s)?;
    }
    Ok(next)
}

/// The update among `candidates` whose transfer would finish first under the
/// current network state; end-time ties go to the lower id.
pub fn shortest_update<'a>(
    candidates: &[&'a UpdateRequest],
    nw: &NetworkState,
    server: NodeId,
) -> Result<&'a UpdateRequest> {
    pick_shortest(candidates, nw, &[server]).map(|(u, _, _)| u)
}

fn pick_shortest<'a>(
    candidates: &[&'a UpdateRequest],
    nw: &NetworkState,
    servers: &[NodeId],
) -> Result<(&'a UpdateRequest, f64, Vec<TransferSchedule>)> {
    let mut best: Option<(&UpdateRequest, f64, Vec<TransferSchedule>)> = None;
    let mut last_err = None;
    for &u in candidates {
        match eval_update(u, nw, servers) {
            Ok((t_en, scheds)) => {
                let better = match &best {
                    None => true,
                    Some((b, bt, _)) => earlier(t_en, u.id, *bt, b.id).is_lt(),
                };
                if better {
                    best = Some((u, t_en, scheds));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| {
        last_err.unwrap_or_else(|| Error::Config("no candidates to pick from".into()))
    })
}

/// Greedy shortest-transfer-first order with no deadlines and no drops; each
/// pick is reserved before the next is evaluated. Returns the batch plan and
/// the network state carrying all its reservations.
pub fn order_sjf(
    batch: &[UpdateRequest],
    nw: &NetworkState,
    server: NodeId,
) -> Result<(OrderedBatch, NetworkState)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut state = nw.clone();
    let mut remaining: Vec<&UpdateRequest> = batch.iter().collect();
    let mut out = OrderedBatch {
        order: Vec::with_capacity(batch.len()),
        dropped: BTreeSet::new(),
        schedules: BTreeMap::new(),
        v_init: 0,
        drop_log: Vec::new(),
    };
    while !remaining.is_empty() {
        let (u, _, scheds) = pick_shortest(&remaining, &state, &[server])?;
        state = reserve_all(&state, &scheds)?;
        out.order.push(u.id);
        out.schedules.insert(u.id, scheds);
        let id = u.id;
        remaining.retain(|r| r.id != id);
    }
    Ok((out, state))
}

/// Deadline-aware pick: among updates due at iteration `it` (deadline ≤ it)
/// take the most urgent, fastest, lowest-id one; with nothing due fall back
/// to shortest-transfer-first.
fn pick_deadline_or_shortest<'a>(
    it: i64,
    candidates: &[(&'a UpdateRequest, i64)],
    nw: &NetworkState,
    servers: &[NodeId],
) -> Result<(&'a UpdateRequest, i64, f64, Vec<TransferSchedule>)> {
    let due: Vec<(&UpdateRequest, i64)> = candidates
        .iter()
        .filter(|(_, dl)| *dl <= it)
        .copied()
        .collect();
    if !due.is_empty() {
        let mut best: Option<(&UpdateRequest, i64, f64, Vec<TransferSchedule>)> = None;
        let mut last_err = None;
        for (u, dl) in due {
            match eval_update(u, nw, servers) {
                Ok((t_en, scheds)) => {
                    let better = match &best {
                        None => true,
                        Some((b, bdl, bt, _)) => {
                            dl < *bdl || (dl == *bdl && earlier(t_en, u.id, *bt, b.id).is_lt())
                        }
                    };
                    if better {
                        best = Some((u, dl, t_en, scheds));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        if let Some(b) = best {
            return Ok(b);
        }
        if let Some(e) = last_err {
            return Err(e);
        }
    }
    let plain: Vec<&UpdateRequest> = candidates.iter().map(|(u, _)| *u).collect();
    let (u, t_en, scheds) = pick_shortest(&plain, nw, servers)?;
    let dl = candidates.iter().find(|(c, _)| c.id == u.id).unwrap().1;
    Ok((u, dl, t_en, scheds))
}

/// Full ordering algorithm: deadline-aware shortest-first selection plus the
/// one-step look-ahead drop test.
pub fn order_final(
    batch: &[UpdateRequest],
    nw: &NetworkState,
    server: NodeId,
    tau_max: u32,
    v_init: u64,
) -> Result<(OrderedBatch, NetworkState)> {
    order_final_multiserver(batch, nw, &[server], tau_max, v_init)
}

/// Sharded-model variant: an update's end time is the latest end over its
/// per-server components, and all components of a picked update are reserved
/// together so shards of different updates never interleave on a link.
pub fn order_final_multiserver(
    batch: &[UpdateRequest],
    nw: &NetworkState,
    servers: &[NodeId],
    tau_max: u32,
    v_init: u64,
) -> Result<(OrderedBatch, NetworkState)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if tau_max == 0 {
        return Err(Error::Config("tau_max must be positive".into()));
    }
    let mut state = nw.clone();
    let mut remaining: Vec<(&UpdateRequest, i64)> = batch
        .iter()
        .map(|u| (u, deadline(u, tau_max, v_init)))
        .collect();
    let mut out = OrderedBatch {
        order: Vec::with_capacity(batch.len()),
        dropped: BTreeSet::new(),
        schedules: BTreeMap::new(),
        v_init,
        drop_log: Vec::new(),
    };
    // `it` counts processed (committed or look-ahead-dropped) picks, per the
    // selection rule; commit positions can only be ≤ it, so deadline matching
    // against `it` is conservative for the delay bound.
    let mut it: i64 = 1;
    while !remaining.is_empty() {
        let (u, dl, t_en, scheds) = pick_deadline_or_shortest(it, &remaining, &state, servers)?;
        let id = u.id;
        let position = out.order.len() as i64 + 1;
        if dl < position {
            // Every remaining position violates the delay bound: shed at the
            // worker without burning a scheduling iteration.
            out.dropped.insert(id);
            out.drop_log.push(DropEvent {
                id,
                reason: DropReason::Expired {
                    dl,
                    position: position as usize,
                },
            });
            remaining.retain(|(r, _)| r.id != id);
            continue;
        }
        // One-step look-ahead: if the next pick (planned on top of this
        // reservation) would still finish earlier, committing this update
        // would only hold every later commit hostage. Drop it instead.
        let reserved = reserve_all(&state, &scheds)?;
        if remaining.len() > 1 {
            let rest: Vec<(&UpdateRequest, i64)> = remaining
                .iter()
                .filter(|(r, _)| r.id != id)
                .copied()
                .collect();
            if let Ok((_, _, t_en_next, _)) =
                pick_deadline_or_shortest(it + 1, &rest, &reserved, servers)
            {
                if t_en > t_en_next + TIME_EPS {
                    out.dropped.insert(id);
                    out.drop_log.push(DropEvent {
                        id,
                        reason: DropReason::LookAhead {
                            t_en_dropped: t_en,
                            t_en_next,
                        },
                    });
                    remaining.retain(|(r, _)| r.id != id);
                    it += 1;
                    continue;
                }
            }
        }
        out.order.push(id);
        out.schedules.insert(id, scheds);
        state = reserved;
        remaining.retain(|(r, _)| r.id != id);
        it += 1;
    }
    Ok((out, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netstate::BandwidthProfile;

    const MB: f64 = 1e6;
    /// 1 Mbit/s in bytes/second.
    const MBIT: f64 = 1.25e5;

    fn star(server_rate: f64, worker_rates: &[f64]) -> (NetworkState, NodeId, Vec<NodeId>) {
        // workers 1..=n -> switch 100 -> server 0
        let mut nw = NetworkState::new();
        let server = 0;
        let sw = 100;
        nw.add_link(sw, server, BandwidthProfile::constant(server_rate));
        let mut workers = Vec::new();
        for (i, r) in worker_rates.iter().enumerate() {
            let w = (i + 1) as NodeId;
            nw.add_link(w, sw, BandwidthProfile::constant(*r));
            workers.push(w);
        }
        nw.auto_paths();
        (nw, server, workers)
    }

    fn req(id: u64, worker: NodeId, size: f64, version: u64) -> UpdateRequest {
        UpdateRequest::new(id, worker, size, version, 1.0, 0.0)
    }

    #[test]
    fn deadline_formula() {
        let u = req(1, 1, MB, 95);
        assert_eq!(deadline(&u, 30, 100), 25);
        let u = req(1, 1, MB, 100);
        assert_eq!(deadline(&u, 30, 100), 30);
        let u = req(1, 1, MB, 70);
        assert_eq!(deadline(&u, 30, 100), 0);
    }

    #[test]
    fn shortest_prefers_small_on_shared_bottleneck() {
        let (nw, server, w) = star(10.0 * MB, &[100.0 * MB, 100.0 * MB]);
        let a = req(1, w[0], 10.0 * MB, 0);
        let b = req(2, w[1], 20.0 * MB, 0);
        let got = shortest_update(&[&a, &b], &nw, server).unwrap();
        assert_eq!(got.id, 1);
    }

    #[test]
    fn shortest_is_about_time_not_bytes() {
        // 100 MB behind a fat private link beats 10 MB behind a trickle.
        let (nw, server, w) = star(1000.0 * MB, &[100.0 * MB, 1.0 * MB]);
        let big = req(1, w[0], 100.0 * MB, 0);
        let small = req(2, w[1], 10.0 * MB, 0);
        let got = shortest_update(&[&big, &small], &nw, server).unwrap();
        assert_eq!(got.id, 1);
        let only = shortest_update(&[&small], &nw, server).unwrap();
        assert_eq!(only.id, 2);
    }

    #[test]
    fn sjf_tie_breaks_by_id_and_packs_bottleneck() {
        let (nw, server, w) = star(10.0 * MB, &[100.0 * MB, 100.0 * MB, 100.0 * MB]);
        let batch = vec![
            req(3, w[2], 10.0 * MB, 0),
            req(1, w[0], 10.0 * MB, 0),
            req(2, w[1], 10.0 * MB, 0),
        ];
        let (plan, _) = order_sjf(&batch, &nw, server).unwrap();
        assert_eq!(plan.order, vec![1, 2, 3]);
        for (i, id) in plan.order.iter().enumerate() {
            assert!((plan.t_en(*id).unwrap() - (i as f64 + 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn sjf_minimizes_mean_end_time_on_one_bottleneck() {
        let (nw, server, w) = star(10.0 * MB, &[100.0 * MB, 100.0 * MB, 100.0 * MB]);
        let batch = vec![
            req(1, w[0], 30.0 * MB, 0),
            req(2, w[1], 10.0 * MB, 0),
            req(3, w[2], 20.0 * MB, 0),
        ];
        let (plan, _) = order_sjf(&batch, &nw, server).unwrap();
        assert_eq!(plan.order, vec![2, 3, 1]);
        let ends: Vec<f64> = plan.order.iter().map(|id| plan.t_en(*id).unwrap()).collect();
        assert_eq!(ends, vec![1.0, 3.0, 6.0]);
        let sjf_mean: f64 = ends.iter().sum::<f64>() / 3.0;

        // exhaustive 3! search: no permutation beats SJF's mean end time
        let perms: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        for p in perms {
            let mut state = nw.clone();
            let mut sum = 0.0;
            for &i in &p {
                let u = &batch[i];
                let s = state
                    .transfer_end_time(u.id, u.size, u.worker, server, u.t_avail)
                    .unwrap();
                state = state.reserve(&s).unwrap();
                sum += s.t_en;
            }
            assert!(sjf_mean <= sum / 3.0 + 1e-9, "beaten by {p:?}");
        }
    }

    #[test]
    fn disjoint_paths_run_independently() {
        let mut nw = NetworkState::new();
        nw.add_link(1, 10, BandwidthProfile::constant(5.0 * MB));
        nw.add_link(2, 10, BandwidthProfile::constant(2.0 * MB));
        nw.auto_paths();
        // two separate sinks share nothing: both finish as if alone
        let batch = vec![req(1, 1, 10.0 * MB, 0), req(2, 2, 10.0 * MB, 0)];
        let (plan, _) = order_sjf(&batch, &nw, 10).unwrap();
        assert!((plan.t_en(1).unwrap() - 2.0).abs() < 1e-9);
        assert!((plan.t_en(2).unwrap() - 5.0).abs() < 1e-9);
    }

    /// The two-worker instance behind the look-ahead rule: a deadline-forced
    /// slow update is dropped and the fast one is scheduled immediately.
    #[test]
    fn lookahead_drops_slow_deadline_update() {
        let mut nw = NetworkState::new();
        let (w1, w2, sw, server) = (1, 2, 100, 0);
        nw.add_link(w1, sw, BandwidthProfile::constant(10.0 * MBIT));
        nw.add_link(w2, sw, BandwidthProfile::constant(100.0 * MBIT));
        nw.add_link(sw, server, BandwidthProfile::constant(100.0 * MBIT));
        nw.auto_paths();
        // v_init 10, tau_max 5: versions 6 and 10 give deadlines 1 and 5.
        let g1 = req(1, w1, 100.0 * MBIT, 6); // 100 Mbit at 10 Mbps → 10 s
        let g2 = req(2, w2, 99.0 * MBIT, 10); // 99 Mbit at 90 Mbps → 1.1 s
        let (plan, _) = order_final(&[g1, g2], &nw, server, 5, 10).unwrap();
        assert_eq!(plan.order, vec![2]);
        assert!(plan.dropped.contains(&1));
        assert!(matches!(
            plan.drop_log[0].reason,
            DropReason::LookAhead { .. }
        ));
        // with g1 gone, g2 gets the full 100 Mbps immediately
        assert!((plan.t_en(2).unwrap() - 0.99).abs() < 1e-9);
    }

    #[test]
    fn no_binding_deadlines_reduces_to_sjf() {
        let (nw, server, w) = star(10.0 * MB, &[100.0 * MB, 100.0 * MB, 100.0 * MB]);
        let batch = vec![
            req(1, w[0], 30.0 * MB, 100),
            req(2, w[1], 10.0 * MB, 100),
            req(3, w[2], 20.0 * MB, 100),
        ];
        let (sjf, _) = order_sjf(&batch, &nw, server).unwrap();
        let (fin, _) = order_final(&batch, &nw, server, 30, 100).unwrap();
        assert_eq!(sjf.order, fin.order);
        assert_eq!(sjf.schedules, fin.schedules);
        assert!(fin.dropped.is_empty());
    }

    #[test]
    fn expired_deadline_drops_immediately() {
        let (nw, server, w) = star(10.0 * MB, &[100.0 * MB, 100.0 * MB]);
        // version 70 at v_init 100 with tau_max 30 → deadline 0
        let stale = req(1, w[0], 10.0 * MB, 70);
        let fresh = req(2, w[1], 10.0 * MB, 100);
        let (plan, _) = order_final(&[stale, fresh], &nw, server, 30, 100).unwrap();
        assert_eq!(plan.order, vec![2]);
        assert!(matches!(
            plan.drop_log[0].reason,
            DropReason::Expired { dl: 0, position: 1 }
        ));
    }

    #[test]
    fn committed_delays_respect_bound() {
        // tight bound: only tau_max commits can happen before the rest expire
        let (nw, server, w) = star(10.0 * MB, &[100.0 * MB; 6]);
        let batch: Vec<UpdateRequest> = (0..6)
            .map(|i| req(i as u64 + 1, w[i], 10.0 * MB, 98 + (i as u64 % 3)))
            .collect();
        let (plan, _) = order_final(&batch, &nw, server, 3, 100).unwrap();
        for (pos, id) in plan.order.iter().enumerate() {
            let u = batch.iter().find(|u| u.id == *id).unwrap();
            let delay = pos as i64 + (100 - u.version as i64);
            assert!(delay <= 3, "update {id} at position {} has delay {delay}", pos + 1);
        }
        assert!(!plan.order.is_empty());
    }

    #[test]
    fn multiserver_degenerates_to_single() {
        let (nw, server, w) = star(10.0 * MB, &[100.0 * MB, 100.0 * MB, 100.0 * MB]);
        let batch = vec![
            req(1, w[0], 30.0 * MB, 100),
            req(2, w[1], 10.0 * MB, 100),
            req(3, w[2], 20.0 * MB, 100),
        ];
        let (single, _) = order_final(&batch, &nw, server, 30, 100).unwrap();
        let (multi, _) = order_final_multiserver(&batch, &nw, &[server], 30, 100).unwrap();
        assert_eq!(single, multi);
    }

    #[test]
    fn multiserver_orders_by_component_max() {
        // two servers on separate links from the switch; g1 is tiny toward
        // s1 but huge toward s2, so its end time is governed by the max
        let mut nw = NetworkState::new();
        let (w1, w2, sw, s1, s2) = (1, 2, 100, 50, 51);
        for w in [w1, w2] {
            nw.add_link(w, sw, BandwidthProfile::constant(100.0 * MB));
        }
        nw.add_link(sw, s1, BandwidthProfile::constant(10.0 * MB));
        nw.add_link(sw, s2, BandwidthProfile::constant(10.0 * MB));
        nw.auto_paths();
        let mk = |id, worker, c1: f64, c2: f64, version| UpdateRequest {
            id,
            worker,
            size: c1 + c2,
            version,
            norm: 1.0,
            t_avail: 0.0,
            components: Some(vec![(s1, c1), (s2, c2)]),
        };
        let g1 = mk(1, w1, 1.0 * MB, 40.0 * MB, 100);
        let g2 = mk(2, w2, 20.0 * MB, 20.0 * MB, 100);
        let (plan, _) = order_final_multiserver(&[g1.clone(), g2.clone()], &nw, &[s1, s2], 30, 100)
            .unwrap();
        // alone, g1 ends at max(0.1, 4.0) = 4.0 and g2 at max(2.0, 2.0) = 2.0
        assert_eq!(plan.order, vec![2, 1]);
        // all components of g2 are reserved before any of g1:
        // g1's s1 shard waits behind g2's despite being tiny
        let g1_s1 = &plan.schedules[&1][0];
        let g2_s1 = &plan.schedules[&2][0];
        assert!(g1_s1.t_st >= g2_s1.t_en - TIME_EPS);
        // and each update's commit time is the max over its components,
        // matching an exhaustive check of both orders
        assert!((plan.t_en(2).unwrap() - 2.0).abs() < 1e-9);
        assert!((plan.t_en(1).unwrap() - 6.0).abs() < 1e-9);
    }
}
