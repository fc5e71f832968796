//! Ordering a batch of gradient pushes: shortest-delivery-first, then the
//! deadline-aware pass that drops updates whose staleness budget cannot be
//! met.

use gradfabric::netstate::{BandwidthProfile, NetworkState};
use gradfabric::ordering::{deadline, order_final, order_sjf, UpdateRequest};

fn main() -> gradfabric::Result<()> {
    let mut nw = NetworkState::new();
    let (server, hub) = (0, 100);
    nw.add_link(hub, server, BandwidthProfile::constant(10e6));
    for w in 1..=4 {
        nw.add_link(w, hub, BandwidthProfile::constant(100e6));
    }
    nw.auto_paths();

    // three fresh updates and one large, very stale one whose deadline
    // allows only the first two commit positions
    let committed = 20;
    let batch = vec![
        UpdateRequest::new(1, 1, 120e6, 19, 1.0, 0.0),
        UpdateRequest::new(2, 2, 30e6, 20, 1.0, 0.0),
        UpdateRequest::new(3, 3, 200e6, 16, 1.0, 0.0),
        UpdateRequest::new(4, 4, 25e6, 20, 1.0, 0.0),
    ];
    let tau_max = 6;
    for u in &batch {
        println!(
            "update {}: {} MB, version {}, commit deadline position {}",
            u.id,
            u.size / 1e6,
            u.version,
            deadline(u, tau_max, committed)
        );
    }

    let (sjf, _) = order_sjf(&batch, &nw, server)?;
    println!("shortest-first order: {:?}", sjf.order);

    // the stale 20 MB update must commit within the first two positions, so
    // the final pass reorders or drops to respect every deadline
    let (fin, _) = order_final(&batch, &nw, server, tau_max, committed)?;
    println!("deadline-aware order: {:?}, dropped: {:?}", fin.order, fin.dropped);
    for id in &fin.order {
        println!("  update {id} delivered by {:.2} s", fin.t_en(*id).unwrap());
    }
    Ok(())
}
