//! Opportunistic in-network aggregation: when the server NIC is the
//! bottleneck, combining updates at idle aggregators shortens the batch.

use gradfabric::aggregation::{det_agg, plan_aggregation};
use gradfabric::netstate::{BandwidthProfile, NetworkState};
use gradfabric::ordering::{order_sjf, UpdateRequest};

fn main() -> gradfabric::Result<()> {
    let (server, hub) = (0, 100);
    let mut nw = NetworkState::new();
    // slow server ingest, fat everything else
    nw.add_link(hub, server, BandwidthProfile::constant(10e6));
    let aggregators = vec![50, 51];
    for a in &aggregators {
        nw.add_link(hub, *a, BandwidthProfile::constant(100e6));
        nw.add_link(*a, hub, BandwidthProfile::constant(100e6));
    }
    let batch: Vec<UpdateRequest> = (1..=6)
        .map(|i| {
            nw.add_link(i as u32, hub, BandwidthProfile::constant(100e6));
            UpdateRequest::new(i, i as u32, 12e6, 0, 1.0, 0.0)
        })
        .collect();
    nw.auto_paths();

    let (ordered, _) = order_sjf(&batch, &nw, server)?;

    // all six direct: the 72 MB queue up on the 10 MB/s ingest link
    let direct = det_agg(6, &ordered, &batch, &nw, server, &aggregators)?;
    println!("all direct: batch done at {:.2} s", direct.total_time);

    // the planner hides grouped updates behind the direct prefix
    let plan = plan_aggregation(&ordered, &batch, &nw, server, &aggregators)?;
    println!(
        "planned: {} direct, {} groups, done at {:.2} s",
        plan.n_direct,
        plan.groups.len(),
        plan.total_time
    );
    for g in &plan.groups {
        let members: Vec<u64> = g.inbound.iter().map(|s| s.update_id).collect();
        println!(
            "  aggregator {} combines {:?}, lands {:.2} s",
            g.aggregator, members, g.aggregate.t_en
        );
    }
    for (id, t) in plan.commit_times() {
        println!("  update {id} commits at {t:.2} s");
    }
    Ok(())
}
