//! Replica traffic vs the divergence budget: a loose budget lets the planner
//! coalesce replica transfers into combined updates, cutting the bytes each
//! committed update costs without losing the bound.

use gradfabric::config::ScenarioConfig;
use gradfabric::simlab::run_scenario;

fn main() -> gradfabric::Result<()> {
    let mut base = ScenarioConfig::default();
    base.duration_s = 30.0;
    // A wider admission window gives the planner more updates to coalesce per
    // round, which is where the traffic saving comes from.
    base.batch_window_s = 0.2;
    let mut at_zero = None;
    for div_max in [0.0, 5.0, 30.0, 120.0, 600.0] {
        let mut cfg = base.clone();
        cfg.div_max = div_max;
        let m = run_scenario(&cfg)?;
        let per_commit = m.bytes_to_replica / m.commits.len().max(1) as f64;
        let factor = at_zero.get_or_insert(per_commit).max(1.0) / per_commit.max(1.0);
        println!(
            "budget {div_max:>5}: {:>5.1} MB of replica traffic per commit across {} commits \
             ({factor:.2}x less than strict), {} held commits",
            per_commit / 1e6,
            m.commits.len(),
            m.delayed_commits
        );
    }
    Ok(())
}
