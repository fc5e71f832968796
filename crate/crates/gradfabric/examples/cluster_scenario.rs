//! A full cluster run: asynchronous control plane vs ring all-reduce under
//! the same straggler and network conditions, compared by simulated time to
//! a target loss gap.

use gradfabric::config::{Mode, ScenarioConfig};
use gradfabric::simlab::{run_scenario, time_to_loss, SgdLabConfig};

fn main() -> gradfabric::Result<()> {
    let mut cfg = ScenarioConfig::preset("C2-N1")?;
    cfg.duration_s = 60.0;

    let a = run_scenario(&cfg)?;
    let mean_delay =
        a.commits.iter().map(|c| c.delay).sum::<u64>() as f64 / a.commits.len().max(1) as f64;
    println!(
        "async: {} commits, {} drops, mean staleness {mean_delay:.1}, {:.2} GB to server",
        a.commits.len(),
        a.drops,
        a.bytes_to_server / 1e9
    );

    cfg.mode = Mode::AllreduceEmulation;
    cfg.duration_s = 300.0;
    let r = run_scenario(&cfg)?;
    println!("ring: {} rounds of {} workers", r.sync_rounds, cfg.workers);

    let lab = SgdLabConfig::default();
    let target = 1e-2;
    let (_, ta) = time_to_loss(&a, &lab, target, 1)?;
    let (_, tr) = time_to_loss(&r, &lab, target, cfg.workers)?;
    match (ta, tr) {
        (Some(ta), Some(tr)) => println!(
            "loss gap {target} reached in {ta:.1} s async vs {tr:.1} s ring ({:.2}x)",
            tr / ta
        ),
        _ => println!("target {target} not reached by both runs (async {ta:?}, ring {tr:?})"),
    }
    Ok(())
}
