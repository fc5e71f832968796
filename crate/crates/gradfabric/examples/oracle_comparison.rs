//! Heuristic planning vs exhaustive search on small random instances.

use gradfabric::oracle::{compare_once, random_comparison_instance, Objective};

fn main() -> gradfabric::Result<()> {
    let instances = 40;
    let mut worst: (f64, u64) = (1.0, 0);
    for index in 0..instances {
        let inst = random_comparison_instance(7, index);
        for objective in [Objective::Async, Objective::Sync] {
            let out = compare_once(&inst, objective)?;
            if out.ratio > worst.0 {
                worst = (out.ratio, index);
            }
            if out.ratio > 1.05 {
                println!(
                    "instance {index} ({:?}, {} updates): heuristic {:.3} vs optimum {:.3} ({:.3}x)",
                    objective,
                    inst.batch.len(),
                    out.heuristic,
                    out.oracle,
                    out.ratio
                );
            }
        }
    }
    println!("worst ratio over {instances} instances: {:.4} (instance {})", worst.0, worst.1);
    Ok(())
}
