//! Discrete-event cluster simulation and the convex-SGD convergence lab.
//!
//! The scenario simulator drives the planning stack end to end: workers
//! compute gradients under a straggler model, pushes collect into batch
//! windows, and every window the scheduler plans ordering, aggregation, and
//! replication on a lagged view of a fluctuating network. Plans are then held
//! against the true capacities, so a stale view shows up as stretched
//! delivery, late commits, and eventually drops. The lab swaps the cluster
//! for a seeded quadratic objective to measure how delay variance alone
//! changes convergence.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::aggregation::{plan_aggregation, plan_distribution, AggregationPlan};
use crate::config::{Mode, ScenarioConfig, GBPS, MB, RATES_GBPS};
use crate::netstate::{BandwidthProfile, NetworkState, NodeId, TransferSchedule};
use crate::ordering::{order_final, order_sjf, DropReason, UpdateRequest};
use crate::replication::{plan_replication, DivergenceLedger};
use crate::rng::substream;
use crate::{Error, Result, TIME_EPS};

/// Parameter-server process, co-hosted on the server machine.
pub const SERVER: NodeId = 0;

/// Standby replica process, on its own machine: replica traffic rides a
/// dedicated NIC instead of competing with server ingest.
pub const REPLICA: NodeId = 1;

/// The server machine's network endpoint.
pub const SERVER_MACHINE: NodeId = 2;

/// The replica machine's network endpoint.
pub const REPLICA_MACHINE: NodeId = 3;

/// Switch fabric every host NIC attaches to.
pub const HUB: NodeId = 5_000;

/// Worker `i` is node `WORKER_BASE + i`.
pub const WORKER_BASE: NodeId = 10;

/// Aggregator `i` is node `AGGREGATOR_BASE + i`.
pub const AGGREGATOR_BASE: NodeId = 2_000;

/// Replica-side aggregator `i` is node `REPLICA_AGGREGATOR_BASE + i`.
pub const REPLICA_AGGREGATOR_BASE: NodeId = 3_000;

/// Where a worker is in its push loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerState {
    Computing,
    PushPending,
    AwaitingModel,
    /// The run's horizon passed before the next gradient would finish.
    Idle,
}

/// One simulated worker: pulls a model, computes a gradient (slowed down with
/// some probability), pushes it, and waits for the next model.
#[derive(Debug, Clone)]
pub struct WorkerProcess {
    pub id: NodeId,
    pub compute_time_base: f64,
    /// Straggler probability in percent.
    pub straggle_prob: f64,
    /// Slowdown factor on straggler iterations.
    pub slowdown: f64,
    pub state: WorkerState,
    /// Model version last pulled; the next gradient carries it.
    pub pulled_version: u64,
    rng: ChaCha8Rng,
}

impl WorkerProcess {
    pub fn new(id: NodeId, base: f64, prob: f64, slowdown: f64, rng: ChaCha8Rng) -> Self {
        WorkerProcess {
            id,
            compute_time_base: base,
            straggle_prob: prob,
            slowdown,
            state: WorkerState::Computing,
            pulled_version: 0,
            rng,
        }
    }

    /// Per-iteration compute time: base, or base times the slowdown with the
    /// straggler probability.
    pub fn draw_compute(&mut self) -> f64 {
        if self.rng.gen_bool(self.straggle_prob / 100.0) {
            self.compute_time_base * self.slowdown
        } else {
            self.compute_time_base
        }
    }
}

/// One committed update as the server saw it.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitRecord {
    pub id: u64,
    pub worker: NodeId,
    /// Model version after applying this update (1-based commit index).
    pub position: u64,
    /// Model version the gradient was computed against.
    pub version: u64,
    /// Staleness at commit: versions applied since the gradient's snapshot.
    pub delay: u64,
    pub time: f64,
}

/// Everything a run reports; two runs with the same config and seed compare
/// equal.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub commits: Vec<CommitRecord>,
    pub drops: u64,
    /// `(batch time, update id, reason)` per dropped update.
    pub drop_log: Vec<(f64, u64, String)>,
    pub pushes: u64,
    pub batches: u64,
    pub sync_rounds: u64,
    pub duration_s: f64,
    /// Bytes landing on the server (direct sends plus combined updates).
    pub bytes_to_server: f64,
    /// Bytes landing on aggregators (member legs of both planes).
    pub bytes_to_aggregators: f64,
    /// Bytes landing on the replica.
    pub bytes_to_replica: f64,
    pub bytes_per_link: BTreeMap<(NodeId, NodeId), f64>,
    /// `(batch commit horizon, divergence bound)` per replicated batch.
    pub divergence_trace: Vec<(f64, f64)>,
    /// `(update id, replica commit time)` in replica apply order.
    pub replica_commits: Vec<(u64, f64)>,
    /// Server commits held back so the replica could catch up.
    pub delayed_commits: u64,
    pub punted_replica_updates: u64,
    /// `(iteration, loss gap)` from the convergence lab.
    pub loss_trace: Vec<(u64, f64)>,
    pub iterations_to_target: Option<u64>,
    pub seconds_to_target: Option<f64>,
    pub diverged: bool,
}

impl RunMetrics {
    fn new(duration_s: f64) -> Self {
        RunMetrics {
            commits: Vec::new(),
            drops: 0,
            drop_log: Vec::new(),
            pushes: 0,
            batches: 0,
            sync_rounds: 0,
            duration_s,
            bytes_to_server: 0.0,
            bytes_to_aggregators: 0.0,
            bytes_to_replica: 0.0,
            bytes_per_link: BTreeMap::new(),
            divergence_trace: Vec::new(),
            replica_commits: Vec::new(),
            delayed_commits: 0,
            punted_replica_updates: 0,
            loss_trace: Vec::new(),
            iterations_to_target: None,
            seconds_to_target: None,
            diverged: false,
        }
    }
}

/// Event kinds: 0 = worker pulls a model and starts computing, 1 = gradient
/// ready (push), 2 = batch window. The loop is keyed on (time, kind, id).
#[derive(Debug, Clone, Copy, PartialEq)]
struct Event {
    time: f64,
    kind: u8,
    id: u64,
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.kind.cmp(&other.kind))
            .then(self.id.cmp(&other.id))
    }
}

struct Cluster {
    nw: NetworkState,
    workers: Vec<NodeId>,
    aggregators: Vec<NodeId>,
    replica_aggregators: Vec<NodeId>,
}

/// Capacity trace for one NIC direction: redrawn every period from the rate
/// set, scaled to the configured NIC speed, pinned per link by the seed.
fn nic_trace(cfg: &ScenarioConfig, p: &[f64; 5], src: NodeId, dst: NodeId) -> Result<BandwidthProfile> {
    let scale = cfg.topology.nic_gbps / 10.0;
    // enough epochs that transfers finishing past the horizon still see real
    // draws; the last rate extends forever after that
    let epochs = ((cfg.duration_s * 2.0 / cfg.period_s).ceil() as usize).max(1) + 4;
    let mut rng = substream(cfg.seed, &format!("net/{src}-{dst}"));
    let mut segs = Vec::with_capacity(epochs);
    for j in 0..epochs {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut rate = RATES_GBPS[RATES_GBPS.len() - 1];
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                rate = RATES_GBPS[i];
                break;
            }
        }
        segs.push((j as f64 * cfg.period_s, rate * scale * GBPS));
    }
    BandwidthProfile::from_segments(segs)
}

fn build_cluster(cfg: &ScenarioConfig) -> Result<Cluster> {
    let p = cfg.network.resolve()?;
    let mut nw = NetworkState::new();
    let nic = |nw: &mut NetworkState, host: NodeId| -> Result<()> {
        nw.add_link(host, HUB, nic_trace(cfg, &p, host, HUB)?);
        nw.add_link(HUB, host, nic_trace(cfg, &p, HUB, host)?);
        Ok(())
    };
    let workers: Vec<NodeId> = (0..cfg.workers).map(|i| WORKER_BASE + i as NodeId).collect();
    let aggregators: Vec<NodeId> =
        (0..cfg.aggregators).map(|i| AGGREGATOR_BASE + i as NodeId).collect();
    let replica_aggregators: Vec<NodeId> =
        (0..cfg.replica_aggregators).map(|i| REPLICA_AGGREGATOR_BASE + i as NodeId).collect();
    for w in &workers {
        nic(&mut nw, *w)?;
    }
    for a in aggregators.iter().chain(&replica_aggregators) {
        nic(&mut nw, *a)?;
    }
    nic(&mut nw, SERVER_MACHINE)?;
    nic(&mut nw, REPLICA_MACHINE)?;
    let intra = BandwidthProfile::constant(cfg.topology.intra_host_gbps * GBPS);
    nw.add_link(SERVER_MACHINE, SERVER, intra.clone());
    nw.add_link(SERVER, SERVER_MACHINE, intra.clone());
    nw.add_link(REPLICA_MACHINE, REPLICA, intra);
    nw.auto_paths();
    Ok(Cluster { nw, workers, aggregators, replica_aggregators })
}

/// Model version committed by time `t`: count of commit instants at or before
/// it.
fn version_at(committed: &[f64], t: f64) -> u64 {
    committed.partition_point(|ct| *ct <= t + TIME_EPS) as u64
}

fn account(m: &mut RunMetrics, s: &TransferSchedule) {
    let bytes = s.rate_profile.integral(s.t_st, s.t_en);
    for e in &s.path {
        *m.bytes_per_link.entry(*e).or_insert(0.0) += bytes;
    }
    match s.path.last() {
        Some(&(_, SERVER)) => m.bytes_to_server += bytes,
        Some(&(_, REPLICA)) => m.bytes_to_replica += bytes,
        Some(&(_, dst)) if (AGGREGATOR_BASE..HUB).contains(&dst) => {
            m.bytes_to_aggregators += bytes
        }
        _ => {}
    }
}

/// Book a batch plan on the true network and return each update's physical
/// arrival, in plan order. A grouped update lands when its group's combined
/// update and every member leg have landed; a combined update never beats the
/// members it carries.
fn apply_plan(nw: &mut NetworkState, plan: &AggregationPlan) -> Result<Vec<(u64, f64)>> {
    for s in &plan.direct {
        nw.apply_booked(s);
    }
    for g in &plan.groups {
        for s in &g.inbound {
            nw.apply_booked(s);
        }
        nw.apply_booked(&g.aggregate);
    }
    let mut group_end = Vec::with_capacity(plan.groups.len());
    for g in &plan.groups {
        let mut t = nw.actual_completion(&g.aggregate)?;
        for s in &g.inbound {
            t = t.max(nw.actual_completion(s)?);
        }
        group_end.push(t);
    }
    let mut direct_it = plan.direct.iter();
    let mut out = Vec::with_capacity(plan.order.len());
    for id in &plan.order {
        let raw = match plan.assignment[id] {
            0 => nw.actual_completion(direct_it.next().expect("direct schedule per direct update"))?,
            aid => group_end[aid as usize - 1],
        };
        out.push((*id, raw));
    }
    Ok(out)
}

/// Run the configured scenario: the async control plane, or one of the two
/// synchronous baselines when the mode says so.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    match cfg.mode {
        Mode::Async => run_async(cfg),
        Mode::Sync | Mode::AllreduceEmulation => run_sync_baseline(cfg),
    }
}

/// Synchronous baselines: per-round planned batch transfer (`Sync`) or the
/// ring all-reduce cost model (`AllreduceEmulation`).
pub fn run_sync_baseline(cfg: &ScenarioConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    match cfg.mode {
        Mode::AllreduceEmulation => run_ring(cfg),
        _ => run_sync_planned(cfg),
    }
}

fn make_workers(cfg: &ScenarioConfig, nodes: &[NodeId]) -> Result<Vec<WorkerProcess>> {
    let (r, s) = cfg.compute.resolve()?;
    Ok(nodes
        .iter()
        .enumerate()
        .map(|(i, id)| {
            WorkerProcess::new(*id, cfg.compute_base_s, r, s, substream(cfg.seed, &format!("straggler/{i}")))
        })
        .collect())
}

/// Pull the model at `t` and start computing; the gradient-ready event lands
/// on the heap unless the run ends before the last batch window could take it.
fn start_iteration(
    w: &mut WorkerProcess,
    idx: usize,
    t: f64,
    committed: &[f64],
    heap: &mut BinaryHeap<Reverse<Event>>,
    last_window: f64,
) {
    w.pulled_version = version_at(committed, t);
    let done = t + w.draw_compute();
    if done <= last_window + TIME_EPS {
        w.state = WorkerState::Computing;
        heap.push(Reverse(Event { time: done, kind: 1, id: idx as u64 }));
    } else {
        w.state = WorkerState::Idle;
    }
}

fn run_async(cfg: &ScenarioConfig) -> Result<RunMetrics> {
    let cluster = build_cluster(cfg)?;
    let mut nw = cluster.nw;
    let mut workers = make_workers(cfg, &cluster.workers)?;
    let mut m = RunMetrics::new(cfg.duration_s);

    let window = cfg.batch_window_s;
    let last_window = (cfg.duration_s / window + TIME_EPS).floor() * window;
    let mut heap: BinaryHeap<Reverse<Event>> = BinaryHeap::new();
    heap.push(Reverse(Event { time: window, kind: 2, id: 0 }));
    for i in 0..workers.len() {
        heap.push(Reverse(Event { time: 0.0, kind: 0, id: i as u64 }));
    }

    let mut pending: Vec<UpdateRequest> = Vec::new();
    let mut carried: Vec<UpdateRequest> = Vec::new();
    let mut committed: Vec<f64> = Vec::new();
    let mut committed_at: BTreeMap<u64, f64> = BTreeMap::new();
    let mut replica_horizon = 0.0f64;
    let mut ledger = DivergenceLedger::new(cfg.gamma)?;
    let mut horizon = 0.0f64;
    let mut next_id = 1u64;

    while let Some(Reverse(ev)) = heap.pop() {
        match ev.kind {
            0 => {
                let wi = ev.id as usize;
                start_iteration(&mut workers[wi], wi, ev.time, &committed, &mut heap, last_window);
            }
            1 => {
                let w = &mut workers[ev.id as usize];
                w.state = WorkerState::PushPending;
                pending.push(UpdateRequest::new(
                    next_id,
                    w.id,
                    cfg.update_mb * MB,
                    w.pulled_version,
                    cfg.update_norm,
                    ev.time,
                ));
                next_id += 1;
                m.pushes += 1;
            }
            _ => {
                let t = ev.time;
                if t + window <= last_window + TIME_EPS {
                    heap.push(Reverse(Event { time: t + window, kind: 2, id: 0 }));
                }
                if pending.is_empty() {
                    continue;
                }
                m.batches += 1;
                nw.clock = t;
                nw.compact_history(t, t - cfg.t_lag_s);
                let view = nw.lagged_view(cfg.t_lag_s);

                let v_init = committed.len() as u64;
                let (ordered, _) = order_final(&pending, &view, SERVER, cfg.tau_max, v_init)?;
                m.drops += ordered.dropped.len() as u64;
                for d in &ordered.drop_log {
                    let why = match d.reason {
                        DropReason::Expired { .. } => "expired",
                        DropReason::LookAhead { .. } => "look-ahead",
                    };
                    m.drop_log.push((t, d.id, why.into()));
                }
                // worker index -> time it gets its next model
                let mut restart: Vec<(usize, f64)> = pending
                    .iter()
                    .filter(|u| ordered.dropped.contains(&u.id))
                    .map(|u| ((u.worker - WORKER_BASE) as usize, t))
                    .collect();
                for (wi, _) in &restart {
                    workers[*wi].state = WorkerState::AwaitingModel;
                }

                let mut plan = None;
                let mut rep = None;
                if !ordered.order.is_empty() {
                    let p = plan_aggregation(&ordered, &pending, &view, SERVER, &cluster.aggregators)?;
                    if cfg.replicate {
                        for id in &p.order {
                            let u = pending.iter().find(|u| u.id == *id).expect("ordered id is pending");
                            ledger.commit_server(*id, u.norm)?;
                        }
                        rep = Some(plan_replication(
                            &p,
                            &pending,
                            &carried,
                            &p.nw_after,
                            REPLICA,
                            &cluster.replica_aggregators,
                            cfg.div_max,
                            &ledger,
                        )?);
                    }
                    plan = Some(p);
                }

                if let Some(plan) = &plan {
                    let raw = apply_plan(&mut nw, plan)?;
                    for s in &plan.direct {
                        account(&mut m, s);
                    }
                    for g in &plan.groups {
                        for s in &g.inbound {
                            account(&mut m, s);
                        }
                        account(&mut m, &g.aggregate);
                    }

                    let delayed = rep.as_ref().and_then(|r| r.delayed_server_update);
                    let mut h = horizon.max(t);
                    for (id, raw_t) in &raw {
                        let mut ct = *raw_t;
                        if let Some((did, catch_up)) = delayed {
                            if *id == did {
                                ct = ct.max(catch_up);
                                m.delayed_commits += 1;
                            }
                        }
                        // the server applies updates in plan order: an early
                        // arrival waits for every earlier position
                        h = h.max(ct);
                        committed.push(h);
                        let u = pending.iter().find(|u| u.id == *id).expect("ordered id is pending");
                        let position = committed.len() as u64;
                        m.commits.push(CommitRecord {
                            id: *id,
                            worker: u.worker,
                            position,
                            version: u.version,
                            delay: position - 1 - u.version,
                            time: h,
                        });
                        committed_at.insert(*id, h);
                        workers[(u.worker - WORKER_BASE) as usize].state = WorkerState::AwaitingModel;
                        restart.push(((u.worker - WORKER_BASE) as usize, h));
                    }
                    horizon = h;
                }

                if let Some(rep) = &rep {
                    for s in &rep.frozen {
                        nw.apply_booked(s);
                        account(&mut m, s);
                    }
                    for (id, t_c) in &rep.frozen_commits {
                        ledger.commit_replica(*id)?;
                        // the replica applies strictly in order and never
                        // before the server's own (serialized) apply instant
                        let at = committed_at.get(id).copied().unwrap_or(*t_c);
                        replica_horizon = replica_horizon.max(t_c.max(at));
                        m.replica_commits.push((*id, replica_horizon));
                    }
                    m.punted_replica_updates += rep.punted.len() as u64;
                    m.divergence_trace.push((horizon, rep.bound_at_horizon));
                    log::debug!(
                        "batch at {t:.2}: {} pending -> {} frozen ({:.0} MB), {} punted, bound {:.2}{}",
                        rep.frozen_commits.len() + rep.punted.len(),
                        rep.frozen_commits.len(),
                        rep.frozen_bytes / 1e6,
                        rep.punted.len(),
                        rep.bound_at_horizon,
                        if rep.delayed_server_update.is_some() { " (held last commit)" } else { "" }
                    );
                    let pool: BTreeMap<u64, &UpdateRequest> =
                        carried.iter().chain(pending.iter()).map(|u| (u.id, u)).collect();
                    carried = rep
                        .punted
                        .iter()
                        .map(|id| (*pool.get(id).expect("punted id known")).clone())
                        .collect();
                }

                if cfg.distribute_model {
                    let mut st = match &plan {
                        Some(p) => p.nw_after.clone(),
                        None => view,
                    };
                    if let Some(rep) = &rep {
                        for s in &rep.frozen {
                            st.apply_booked(s);
                        }
                    }
                    // committed workers in plan order, then dropped ones
                    let mut order: Vec<&UpdateRequest> = Vec::new();
                    if let Some(p) = &plan {
                        for id in &p.order {
                            order.push(pending.iter().find(|u| u.id == *id).unwrap());
                        }
                    }
                    order.extend(pending.iter().filter(|u| ordered.dropped.contains(&u.id)));
                    let requests: Vec<(NodeId, f64)> =
                        order.iter().map(|u| (u.worker, cfg.update_mb * MB)).collect();
                    let dist = plan_distribution(&requests, &st, SERVER, &cluster.aggregators)?;
                    let mut receipt: BTreeMap<NodeId, f64> = BTreeMap::new();
                    for s in &dist.direct {
                        nw.apply_booked(s);
                    }
                    for g in &dist.groups {
                        nw.apply_booked(&g.aggregate);
                        for s in &g.inbound {
                            nw.apply_booked(s);
                        }
                    }
                    for s in &dist.direct {
                        account(&mut m, s);
                        receipt.insert(requests[s.update_id as usize].0, nw.actual_completion(s)?);
                    }
                    for g in &dist.groups {
                        account(&mut m, &g.aggregate);
                        let copy = nw.actual_completion(&g.aggregate)?;
                        for s in &g.inbound {
                            account(&mut m, s);
                            let worker = requests[s.update_id as usize].0;
                            receipt.insert(worker, copy.max(nw.actual_completion(s)?));
                        }
                    }
                    for (wi, t_restart) in &mut restart {
                        let worker = WORKER_BASE + *wi as NodeId;
                        *t_restart = t_restart.max(receipt[&worker]);
                    }
                }

                for (wi, t_restart) in restart {
                    heap.push(Reverse(Event { time: t_restart, kind: 0, id: wi as u64 }));
                }
                pending.clear();
            }
        }
    }
    Ok(m)
}

/// Planned synchronous rounds: per round every worker computes, the whole
/// batch is scheduled through the aggregation planner, and the next round
/// starts when the last byte physically lands.
fn run_sync_planned(cfg: &ScenarioConfig) -> Result<RunMetrics> {
    let cluster = build_cluster(cfg)?;
    let mut nw = cluster.nw;
    let mut workers = make_workers(cfg, &cluster.workers)?;
    let mut m = RunMetrics::new(cfg.duration_s);
    let mut t = 0.0f64;
    let mut round = 0u64;
    let mut next_id = 1u64;
    while t < cfg.duration_s - TIME_EPS {
        let mut pending = Vec::with_capacity(workers.len());
        for w in workers.iter_mut() {
            let avail = t + w.draw_compute();
            pending.push(UpdateRequest::new(next_id, w.id, cfg.update_mb * MB, round, cfg.update_norm, avail));
            next_id += 1;
        }
        m.pushes += workers.len() as u64;
        nw.clock = t;
        nw.compact_history(t, t - cfg.t_lag_s);
        let view = nw.lagged_view(cfg.t_lag_s);
        let (ordered, _) = order_sjf(&pending, &view, SERVER)?;
        let plan = plan_aggregation(&ordered, &pending, &view, SERVER, &cluster.aggregators)?;
        let raw = apply_plan(&mut nw, &plan)?;
        for s in &plan.direct {
            account(&mut m, s);
        }
        for g in &plan.groups {
            for s in &g.inbound {
                account(&mut m, s);
            }
            account(&mut m, &g.aggregate);
        }
        let round_end = raw.iter().fold(t, |a, (_, ct)| a.max(*ct));
        round += 1;
        m.sync_rounds += 1;
        m.batches += 1;
        // one model version per round: the batch applies as a single step
        m.commits.push(CommitRecord {
            id: round,
            worker: SERVER,
            position: round,
            version: round - 1,
            delay: 0,
            time: round_end,
        });
        t = round_end;
    }
    Ok(m)
}

/// Time a ring all-reduce moves `bytes` per participant: every worker ships
/// and receives `2(n-1)/n` of the buffer at the slowest participating rate.
pub fn ring_allreduce_seconds(n: usize, bytes: f64, min_rate: f64) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    2.0 * (n - 1) as f64 / n as f64 * bytes / min_rate
}

/// Ring all-reduce cost model: rounds gate on the slowest compute draw, then
/// exchange at the slowest NIC rate in effect when the exchange starts.
fn run_ring(cfg: &ScenarioConfig) -> Result<RunMetrics> {
    let cluster = build_cluster(cfg)?;
    let mut workers = make_workers(cfg, &cluster.workers)?;
    let mut m = RunMetrics::new(cfg.duration_s);
    let size = cfg.update_mb * MB;
    let n = cfg.workers;
    let mut t = 0.0f64;
    let mut round = 0u64;
    while t < cfg.duration_s - TIME_EPS {
        let slowest = workers.iter_mut().map(|w| w.draw_compute()).fold(0.0f64, f64::max);
        let t_comm = t + slowest;
        let mut rate = f64::INFINITY;
        for w in &cluster.workers {
            rate = rate.min(cluster.nw.link(*w, HUB).unwrap().capacity.rate_at(t_comm));
            rate = rate.min(cluster.nw.link(HUB, *w).unwrap().capacity.rate_at(t_comm));
        }
        let end = t_comm + ring_allreduce_seconds(n, size, rate);
        let moved = if n > 1 { 2.0 * (n - 1) as f64 / n as f64 * size } else { 0.0 };
        for w in &cluster.workers {
            *m.bytes_per_link.entry((*w, HUB)).or_insert(0.0) += moved;
            *m.bytes_per_link.entry((HUB, *w)).or_insert(0.0) += moved;
        }
        round += 1;
        m.pushes += n as u64;
        m.sync_rounds += 1;
        m.commits.push(CommitRecord {
            id: round,
            worker: SERVER,
            position: round,
            version: round - 1,
            delay: 0,
            time: end,
        });
        t = end;
    }
    Ok(m)
}

/// Per-update step size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EtaMode {
    /// `C / sqrt(t + tau)`: steps shrink with the update's own staleness.
    Adaptive,
    /// `C / sqrt(tau * t)` with `tau` the delay bound: safe for the worst
    /// admissible staleness.
    WorstCase,
    /// Constant `C`.
    Fixed,
}

/// Step size at iteration `t` (1-based) for an update `tau` versions stale.
pub fn delay_adaptive_eta(c: f64, t: u64, tau: u64, mode: EtaMode) -> f64 {
    match mode {
        EtaMode::Adaptive => c / ((t + tau) as f64).sqrt(),
        EtaMode::WorstCase => c / ((tau as f64) * (t as f64)).sqrt(),
        EtaMode::Fixed => c,
    }
}

/// Where commit staleness comes from in the lab.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayModel {
    /// Serial SGD: every update applies to the model it read.
    None,
    /// Integer delays drawn uniformly from `tau_bar - epsilon ..= tau_bar +
    /// epsilon`.
    Synthetic { tau_bar: u32, epsilon: u32 },
    /// Replay delays recorded by the scenario simulator, cycling.
    Recorded(Vec<u32>),
}

/// Convergence-lab configuration: quadratic objective, delay model, and step
/// schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdLabConfig {
    pub dimension: usize,
    pub condition_number: f64,
    /// Step-size constant C.
    pub c: f64,
    pub tau_max: u32,
    pub gamma: f64,
    pub delay: DelayModel,
    pub eta_mode: EtaMode,
    pub noise_std: f64,
    pub iterations: u64,
    pub seed: u64,
    /// Averaged over `seed..seed+seeds`.
    pub seeds: u64,
    /// Loss gap that stops a run early; 0 disables.
    pub target_gap: f64,
}

impl Default for SgdLabConfig {
    fn default() -> Self {
        SgdLabConfig {
            dimension: 100,
            condition_number: 10.0,
            c: 0.5,
            tau_max: 30,
            gamma: 0.0,
            delay: DelayModel::None,
            eta_mode: EtaMode::Adaptive,
            noise_std: 0.1,
            iterations: 20_000,
            seed: 1,
            seeds: 1,
            target_gap: 0.0,
        }
    }
}

impl SgdLabConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::Config("lab dimension must be positive".into()));
        }
        if self.condition_number < 1.0 {
            return Err(Error::Config(format!(
                "condition number {} must be at least 1",
                self.condition_number
            )));
        }
        if !(self.c > 0.0) {
            return Err(Error::Config(format!("step constant {} must be positive", self.c)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise level must be nonnegative".into()));
        }
        if self.iterations == 0 || self.seeds == 0 {
            return Err(Error::Config("iterations and seeds must be positive".into()));
        }
        if self.tau_max == 0 {
            return Err(Error::Config("tau_max must be at least 1".into()));
        }
        if let DelayModel::Synthetic { tau_bar, epsilon } = self.delay {
            if epsilon > tau_bar {
                return Err(Error::Config(format!(
                    "delay spread {epsilon} exceeds its mean {tau_bar}"
                )));
            }
        }
        Ok(())
    }
}

/// Quadratic objective with controlled conditioning: eigenvalues spread
/// evenly over `[1/kappa, 1]`, optimum seeded and scaled so the loss gap at
/// the origin is exactly 1.
#[derive(Debug, Clone)]
pub struct QuadraticLab {
    pub eigenvalues: Vec<f64>,
    pub w_star: Vec<f64>,
    pub noise_std: f64,
}

impl QuadraticLab {
    pub fn new(dimension: usize, condition_number: f64, noise_std: f64, seed: u64) -> Result<Self> {
        if dimension == 0 || condition_number < 1.0 {
            return Err(Error::Config("lab needs dimension >= 1 and conditioning >= 1".into()));
        }
        let lo = 1.0 / condition_number;
        let eigenvalues: Vec<f64> = (0..dimension)
            .map(|i| {
                if dimension == 1 {
                    1.0
                } else {
                    lo + (1.0 - lo) * i as f64 / (dimension - 1) as f64
                }
            })
            .collect();
        let mut rng = substream(seed, "w-star");
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut w_star: Vec<f64> = (0..dimension).map(|_| normal.sample(&mut rng)).collect();
        let gap0: f64 =
            0.5 * eigenvalues.iter().zip(&w_star).map(|(l, w)| l * w * w).sum::<f64>();
        let scale = (1.0 / gap0).sqrt();
        for w in &mut w_star {
            *w *= scale;
        }
        Ok(QuadraticLab { eigenvalues, w_star, noise_std })
    }

    /// `L(w) - L(w*)` for the quadratic loss.
    pub fn loss_gap(&self, w: &[f64]) -> f64 {
        0.5 * self
            .eigenvalues
            .iter()
            .zip(w)
            .zip(&self.w_star)
            .map(|((l, wi), ws)| l * (wi - ws) * (wi - ws))
            .sum::<f64>()
    }
}

/// One worker's contribution: minus eta times the noisy gradient at its model
/// snapshot. The same minibatch seed always yields the same noise.
pub fn worker_gradient(lab: &QuadraticLab, w: &[f64], minibatch_seed: u64, eta: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(minibatch_seed);
    let normal = Normal::new(0.0, lab.noise_std.max(f64::MIN_POSITIVE)).expect("noise level");
    let zero_noise = lab.noise_std == 0.0;
    lab.eigenvalues
        .iter()
        .zip(w)
        .zip(&lab.w_star)
        .map(|((l, wi), ws)| {
            let xi = if zero_noise { normal.sample(&mut rng) * 0.0 } else { normal.sample(&mut rng) };
            -eta * (l * (wi - ws) + xi)
        })
        .collect()
}

/// Momentum update: `w + u + gamma * (w - w_prev)`.
pub fn sgd_async_step(w: &[f64], w_prev: &[f64], update: &[f64], gamma: f64) -> Vec<f64> {
    debug_assert_eq!(w.len(), w_prev.len());
    debug_assert_eq!(w.len(), update.len());
    w.iter()
        .zip(w_prev)
        .zip(update)
        .map(|((wi, wp), u)| wi + u + gamma * (wi - wp))
        .collect()
}

fn lab_delay_cap(delay: &DelayModel) -> usize {
    match delay {
        DelayModel::None => 0,
        DelayModel::Synthetic { tau_bar, epsilon } => (*tau_bar + *epsilon) as usize,
        DelayModel::Recorded(v) => v.iter().copied().max().unwrap_or(0) as usize,
    }
}

fn lab_run_one(cfg: &SgdLabConfig, seed: u64) -> Result<RunMetrics> {
    let lab = QuadraticLab::new(cfg.dimension, cfg.condition_number, cfg.noise_std, seed)?;
    let mut m = RunMetrics::new(0.0);
    let mut w = vec![0.0; cfg.dimension];
    let mut w_prev = w.clone();
    let depth = lab_delay_cap(&cfg.delay) + 1;
    let mut snaps: VecDeque<Vec<f64>> = VecDeque::with_capacity(depth);
    snaps.push_back(w.clone());
    let mut delay_rng = substream(seed, "delay");
    let mut seed_rng = substream(seed, "noise");
    let stride = (cfg.iterations / 512).max(1);
    for t in 1..=cfg.iterations {
        let tau = match &cfg.delay {
            DelayModel::None => 0,
            DelayModel::Synthetic { tau_bar, epsilon } => {
                // one uniform draw per iteration keeps paired runs at
                // different spreads on common random numbers
                let u: f64 = delay_rng.gen();
                let span = 2 * *epsilon as u64 + 1;
                (*tau_bar as u64 - *epsilon as u64) + ((u * span as f64) as u64).min(span - 1)
            }
            DelayModel::Recorded(v) => v[((t - 1) % v.len() as u64) as usize] as u64,
        };
        let tau_eff = tau.min(t - 1) as usize;
        let eta = match cfg.eta_mode {
            EtaMode::Fixed => cfg.c,
            EtaMode::Adaptive => delay_adaptive_eta(cfg.c, t, tau_eff as u64, EtaMode::Adaptive),
            EtaMode::WorstCase => {
                delay_adaptive_eta(cfg.c, t, cfg.tau_max as u64, EtaMode::WorstCase)
            }
        };
        let snap = &snaps[snaps.len() - 1 - tau_eff];
        let u = worker_gradient(&lab, snap, seed_rng.gen(), eta);
        let next = sgd_async_step(&w, &w_prev, &u, cfg.gamma);
        w_prev = w;
        w = next;
        snaps.push_back(w.clone());
        if snaps.len() > depth {
            snaps.pop_front();
        }
        let gap = lab.loss_gap(&w);
        if t % stride == 0 || t == cfg.iterations {
            m.loss_trace.push((t, gap));
        }
        if !gap.is_finite() || gap > 1e6 {
            m.diverged = true;
            break;
        }
        if cfg.target_gap > 0.0 && gap <= cfg.target_gap {
            m.iterations_to_target = Some(t);
            break;
        }
    }
    Ok(m)
}

/// Replay a run's commit stream through the quadratic lab: one lab iteration
/// per commit, staleness taken from the record, and iterations timestamped by
/// commit times. Batch rounds apply one averaged gradient each, which scales
/// the gradient noise by `1/sqrt(averaged)`. Returns iterations and simulated
/// seconds to the target gap, `None` when the stream ends before reaching it.
pub fn time_to_loss(
    run: &RunMetrics,
    lab_cfg: &SgdLabConfig,
    target_gap: f64,
    averaged: usize,
) -> Result<(Option<u64>, Option<f64>)> {
    if run.commits.is_empty() {
        return Ok((None, None));
    }
    if !(target_gap > 0.0) {
        return Err(Error::Config(format!("target gap {target_gap} must be positive")));
    }
    let cfg = SgdLabConfig {
        delay: DelayModel::Recorded(run.commits.iter().map(|c| c.delay as u32).collect()),
        iterations: run.commits.len() as u64,
        noise_std: lab_cfg.noise_std / (averaged.max(1) as f64).sqrt(),
        target_gap,
        seeds: 1,
        ..lab_cfg.clone()
    };
    cfg.validate()?;
    let m = lab_run_one(&cfg, cfg.seed)?;
    let secs = m.iterations_to_target.map(|k| run.commits[k as usize - 1].time);
    Ok((m.iterations_to_target, secs))
}

/// Run the lab over its seeds and average: the loss trace is the mean gap per
/// recorded iteration (truncated to the shortest run), iterations-to-target
/// averages the seeds that reached it.
pub fn run_convergence_lab(cfg: &SgdLabConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    let runs: Vec<RunMetrics> = (0..cfg.seeds)
        .map(|i| lab_run_one(cfg, cfg.seed + i))
        .collect::<Result<_>>()?;
    if runs.len() == 1 {
        return Ok(runs.into_iter().next().unwrap());
    }
    let mut m = RunMetrics::new(0.0);
    m.diverged = runs.iter().any(|r| r.diverged);
    let shortest = runs.iter().map(|r| r.loss_trace.len()).min().unwrap_or(0);
    for i in 0..shortest {
        let t = runs[0].loss_trace[i].0;
        let mean = runs.iter().map(|r| r.loss_trace[i].1).sum::<f64>() / runs.len() as f64;
        m.loss_trace.push((t, mean));
    }
    let reached: Vec<u64> = runs.iter().filter_map(|r| r.iterations_to_target).collect();
    if !reached.is_empty() {
        m.iterations_to_target = Some(reached.iter().sum::<u64>() / reached.len() as u64);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ComputeSetting, NetworkSetting};

    fn quiet_network() -> NetworkSetting {
        // always the full 10 Gbps
        NetworkSetting::Explicit { p: [0.0, 0.0, 0.0, 0.0, 1.0] }
    }

    fn steady_compute() -> ComputeSetting {
        ComputeSetting::Explicit { r: 0.0, s: 1.0 }
    }

    #[test]
    fn ring_formula_matches_the_closed_form() {
        let t = ring_allreduce_seconds(30, 100.0 * MB, 1.25e9);
        assert!((t - 2.0 * (29.0 / 30.0) * 1e8 / 1.25e9).abs() < 1e-12);
        // the slowest participant governs: halving one rate doubles the time
        assert!((ring_allreduce_seconds(30, 100.0 * MB, 0.625e9) - 2.0 * t).abs() < 1e-12);
        assert_eq!(ring_allreduce_seconds(1, 100.0 * MB, 1.25e9), 0.0);
    }

    /// Published measurement for this configuration: a full exchange (both
    /// pipeline passes) of 100 MB across 30 hosts at 10 Gbps takes 0.32 s.
    #[test]
    fn ring_exchange_reproduces_the_measured_constant() {
        let exchange = 2.0 * ring_allreduce_seconds(30, 100.0 * MB, 1.25e9);
        assert!((exchange - 0.32).abs() / 0.32 < 0.10, "exchange {exchange}");
    }

    /// One worker, fixed rates: the loop settles into a period of transfer
    /// plus compute, rounded up to the batch window. 0.16 s for the 100 MB
    /// push at 5 Gbps plus 0.22 s of compute quantizes to 0.4 s.
    #[test]
    fn single_worker_settles_into_a_fixed_period() {
        let cfg = ScenarioConfig {
            workers: 1,
            duration_s: 20.0,
            compute_base_s: 0.22,
            update_mb: 100.0,
            compute: steady_compute(),
            network: NetworkSetting::Explicit { p: [0.0, 0.0, 0.0, 1.0, 0.0] },
            replicate: false,
            ..ScenarioConfig::default()
        };
        let m = run_scenario(&cfg).unwrap();
        assert_eq!(m.drops, 0);
        assert!(m.commits.len() > 40, "commits {}", m.commits.len());
        for pair in m.commits.windows(2).skip(5) {
            let gap = pair[1].time - pair[0].time;
            assert!((gap - 0.4).abs() < 1e-9, "steady period {gap}");
        }
        assert!(m.commits.iter().all(|c| c.delay == 0));
    }

    #[test]
    fn ring_rounds_track_the_slowed_compute() {
        let cfg = ScenarioConfig {
            mode: Mode::AllreduceEmulation,
            workers: 4,
            duration_s: 10.0,
            compute_base_s: 0.3,
            update_mb: 100.0,
            compute: ComputeSetting::Explicit { r: 100.0, s: 4.0 },
            network: quiet_network(),
            ..ScenarioConfig::default()
        };
        let m = run_scenario(&cfg).unwrap();
        let period = 0.3 * 4.0 + ring_allreduce_seconds(4, 100.0 * MB, 1.25e9);
        assert_eq!(m.sync_rounds as usize, (10.0 / period).ceil() as usize);
        for (i, c) in m.commits.iter().enumerate() {
            assert!((c.time - (i + 1) as f64 * period).abs() < 1e-9);
        }
    }

    #[test]
    fn async_runs_are_deterministic_and_stay_inside_the_delay_bound() {
        let cfg = ScenarioConfig {
            workers: 8,
            duration_s: 12.0,
            tau_max: 12,
            div_max: 5.0,
            update_mb: 50.0,
            seed: 11,
            compute: ComputeSetting::Preset("C2".into()),
            network: NetworkSetting::Preset("N3".into()),
            ..ScenarioConfig::default()
        };
        let a = run_scenario(&cfg).unwrap();
        let b = run_scenario(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(!a.commits.is_empty());
        for (i, c) in a.commits.iter().enumerate() {
            assert_eq!(c.position, i as u64 + 1);
            assert!(c.delay <= cfg.tau_max as u64, "delay {} at position {}", c.delay, c.position);
        }
        for pair in a.commits.windows(2) {
            assert!(pair[1].time >= pair[0].time);
        }
        for (_, bound) in &a.divergence_trace {
            assert!(*bound <= cfg.div_max + 1e-9);
        }
    }

    #[test]
    fn momentum_free_step_is_additive() {
        let w = sgd_async_step(&[1.0, 2.0], &[0.0, 0.0], &[0.5, -1.0], 0.0);
        assert_eq!(w, vec![1.5, 1.0]);
    }

    #[test]
    fn momentum_carries_the_previous_step() {
        let w = sgd_async_step(&[1.0], &[0.5], &[0.0], 0.9);
        assert!((w[0] - 1.45).abs() < 1e-12);
    }

    /// Two steps from history h unroll to (g h + u1) + (g (g h + u1) + u2).
    #[test]
    fn two_steps_match_the_symbolic_expansion() {
        let gamma = 0.7;
        let (h0, u1, u2) = (0.3, 0.1, -0.05);
        let w0 = 2.0;
        let w1 = sgd_async_step(&[w0], &[w0 - h0], &[u1], gamma);
        let w2 = sgd_async_step(&w1, &[w0], &[u2], gamma);
        let first = gamma * h0 + u1;
        let second = gamma * first + u2;
        assert!((w2[0] - w0 - (first + second)).abs() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_the_optimum() {
        let lab = QuadraticLab::new(16, 10.0, 0.0, 3).unwrap();
        let u = worker_gradient(&lab, &lab.w_star.clone(), 99, 0.3);
        assert!(u.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let lab = QuadraticLab::new(7, 4.0, 0.0, 5).unwrap();
        let w: Vec<f64> = (0..7).map(|i| 0.3 * i as f64 - 1.0).collect();
        let grad: Vec<f64> = worker_gradient(&lab, &w, 0, 1.0).iter().map(|u| -u).collect();
        let h = 1e-6;
        for i in 0..w.len() {
            let mut hi = w.clone();
            let mut lo = w.clone();
            hi[i] += h;
            lo[i] -= h;
            let fd = (lab.loss_gap(&hi) - lab.loss_gap(&lo)) / (2.0 * h);
            assert!(
                (grad[i] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "coordinate {i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn doubling_eta_doubles_the_update() {
        let lab = QuadraticLab::new(5, 2.0, 0.2, 8).unwrap();
        let w = vec![0.1; 5];
        let u1 = worker_gradient(&lab, &w, 42, 0.2);
        let u2 = worker_gradient(&lab, &w, 42, 0.4);
        for (a, b) in u1.iter().zip(&u2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn step_size_examples() {
        assert_eq!(delay_adaptive_eta(1.0, 1, 0, EtaMode::Adaptive), 1.0);
        // t + tau quadrupling halves the adaptive step
        let fast = delay_adaptive_eta(1.0, 3, 1, EtaMode::Adaptive);
        let slow = delay_adaptive_eta(1.0, 15, 1, EtaMode::Adaptive);
        assert!((fast - 2.0 * slow).abs() < 1e-12);
        assert!((delay_adaptive_eta(1.0, 30, 30, EtaMode::WorstCase) - 1.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_descent_converges_geometrically() {
        let cfg = SgdLabConfig {
            dimension: 20,
            noise_std: 0.0,
            eta_mode: EtaMode::Fixed,
            c: 0.5,
            iterations: 2_000,
            ..SgdLabConfig::default()
        };
        let m = run_convergence_lab(&cfg).unwrap();
        assert!(!m.diverged);
        for pair in m.loss_trace.windows(2) {
            assert!(pair[1].1 <= pair[0].1 * (1.0 + 1e-12));
        }
        let last = m.loss_trace.last().unwrap().1;
        assert!(last < 1e-8, "final gap {last}");
        // once the slowest mode dominates, the per-stride contraction is flat
        let tail: Vec<f64> = m.loss_trace.iter().rev().take(4).map(|(_, g)| g).copied().collect();
        let r1 = tail[0] / tail[1];
        let r2 = tail[1] / tail[2];
        assert!((r1 / r2 - 1.0).abs() < 0.05, "contraction drifted: {r1} vs {r2}");
    }

    #[test]
    fn serial_noise_floor_decays_like_the_square_root_schedule() {
        let cfg = SgdLabConfig {
            noise_std: 0.5,
            c: 0.5,
            iterations: 100_000,
            seeds: 6,
            ..SgdLabConfig::default()
        };
        let m = run_convergence_lab(&cfg).unwrap();
        let pts: Vec<(f64, f64)> = m
            .loss_trace
            .iter()
            .filter(|(t, _)| *t >= 1_000)
            .map(|(t, g)| ((*t as f64).ln(), g.ln()))
            .collect();
        assert!(pts.len() > 50);
        let n = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        let (sxx, sxy) = pts
            .iter()
            .fold((0.0, 0.0), |(a, b), (x, y)| (a + x * x, b + x * y));
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!((-0.6..=-0.4).contains(&slope), "log-log slope {slope}");
    }

    /// Same mean delay, different spread: the tighter spread should reach the
    /// target in fewer iterations for most paired seeds.
    #[test]
    fn delay_spread_slows_convergence_on_paired_seeds() {
        let base = SgdLabConfig {
            noise_std: 0.3,
            c: 0.5,
            iterations: 400_000,
            target_gap: 1e-2,
            ..SgdLabConfig::default()
        };
        let mut wins = 0;
        for pair in 0..8u64 {
            let tight = SgdLabConfig {
                delay: DelayModel::Synthetic { tau_bar: 8, epsilon: 0 },
                seed: 100 + pair,
                ..base.clone()
            };
            let wide = SgdLabConfig {
                delay: DelayModel::Synthetic { tau_bar: 8, epsilon: 8 },
                seed: 100 + pair,
                ..base.clone()
            };
            let a = run_convergence_lab(&tight).unwrap().iterations_to_target;
            let b = run_convergence_lab(&wide).unwrap().iterations_to_target;
            match (a, b) {
                (Some(a), Some(b)) if a <= b => wins += 1,
                (Some(_), None) => wins += 1,
                _ => {}
            }
        }
        assert!(wins >= 6, "tight spread won only {wins}/8 pairs");
    }
}
