//! Piecewise-constant link capacity: rate lookups, byte integrals, and how a
//! reservation changes what a later transfer sees.

use gradfabric::netstate::{BandwidthProfile, NetworkState};

fn main() -> gradfabric::Result<()> {
    // 10 MB/s for 2 s, a dip to 2 MB/s until t = 5, then 8 MB/s forever
    let profile =
        BandwidthProfile::from_segments(vec![(0.0, 10e6), (2.0, 2e6), (5.0, 8e6)])?;
    println!("rate at t=1: {} B/s", profile.rate_at(1.0));
    println!("rate at t=3: {} B/s", profile.rate_at(3.0));
    println!("bytes over [0, 5): {}", profile.integral(0.0, 5.0));

    let mut nw = NetworkState::new();
    nw.add_link(1, 0, profile);
    nw.auto_paths();

    // 40 MB fill the fast head segment, crawl through the dip, and finish
    // on the tail segment
    let first = nw.transfer_end_time(1, 40e6, 1, 0, 0.0)?;
    println!("40 MB alone: start {}, end {}", first.t_st, first.t_en);

    // with the first transfer booked, the same request sees only residuals
    let reserved = nw.reserve(&first)?;
    let second = reserved.transfer_end_time(2, 40e6, 1, 0, 0.0)?;
    println!("40 MB behind it: start {}, end {}", second.t_st, second.t_en);
    Ok(())
}
