//! Keeping a live replica within a divergence budget: server commits widen
//! the gap, replica commits close it. With room before the batch horizon the
//! planner coalesces replica traffic into combined updates behind an
//! aggregator; when the budget forces a catch-up the oldest updates go
//! direct, and a forced send that lands late holds up the next server batch.

use gradfabric::aggregation::plan_aggregation;
use gradfabric::netstate::{BandwidthProfile, NetworkState};
use gradfabric::ordering::{order_sjf, UpdateRequest};
use gradfabric::replication::{divergence_bound, plan_replication, DivergenceLedger};

fn main() -> gradfabric::Result<()> {
    let (server, replica, hub, ragg) = (0, 1, 100, 200);
    let mut nw = NetworkState::new();
    nw.add_link(hub, server, BandwidthProfile::constant(50e6));
    nw.add_link(hub, replica, BandwidthProfile::constant(25e6));
    nw.add_link(hub, ragg, BandwidthProfile::constant(50e6));
    nw.add_link(ragg, hub, BandwidthProfile::constant(50e6));
    let batch: Vec<UpdateRequest> = (1..=5)
        .map(|i| {
            let worker = 10 + i as u32;
            nw.add_link(worker, hub, BandwidthProfile::constant(50e6));
            UpdateRequest::new(i, worker, 20e6, 0, 1.0, 0.0)
        })
        .collect();
    nw.auto_paths();

    let (ordered, _) = order_sjf(&batch, &nw, server)?;
    let plan = plan_aggregation(&ordered, &batch, &nw, server, &[])?;

    let mut ledger = DivergenceLedger::new(0.5)?;
    for (id, _) in plan.commit_times() {
        let norm = batch.iter().find(|u| u.id == id).unwrap().norm;
        ledger.commit_server(id, norm)?;
    }
    println!("bound with nothing replicated: {:.3}", divergence_bound(&ledger));

    for div_max in [10.0, 4.0, 1.0] {
        let rep = plan_replication(
            &plan,
            &batch,
            &[],
            &plan.nw_after,
            replica,
            &[ragg],
            div_max,
            &ledger,
        )?;
        println!(
            "budget {div_max}: freeze {} transfers ({:.0} MB), replicate {:?}, punt {:?}, bound {:.3}{}",
            rep.frozen.len(),
            rep.frozen_bytes / 1e6,
            rep.frozen_commits.iter().map(|&(id, _)| id).collect::<Vec<_>>(),
            rep.punted,
            rep.bound_at_horizon,
            match rep.delayed_server_update {
                Some((id, t)) => format!(", server holds update {id} until {t:.2} s"),
                None => String::new(),
            }
        );
    }
    Ok(())
}
