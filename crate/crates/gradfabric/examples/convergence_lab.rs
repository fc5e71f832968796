//! Convex-SGD lab: how commit staleness and its variance change convergence
//! on a controlled quadratic objective.

use gradfabric::simlab::{run_convergence_lab, DelayModel, SgdLabConfig};

fn main() -> gradfabric::Result<()> {
    let base = SgdLabConfig {
        iterations: 60_000,
        noise_std: 0.3,
        target_gap: 1e-2,
        seeds: 3,
        ..SgdLabConfig::default()
    };
    let cases = [
        ("serial", DelayModel::None),
        ("steady delay 16", DelayModel::Synthetic { tau_bar: 16, epsilon: 2 }),
        ("volatile delay 16", DelayModel::Synthetic { tau_bar: 16, epsilon: 16 }),
    ];
    for (name, delay) in cases {
        let cfg = SgdLabConfig { delay, ..base.clone() };
        let m = run_convergence_lab(&cfg)?;
        match m.iterations_to_target {
            Some(t) => println!("{name}: loss gap {} reached in {t} iterations", cfg.target_gap),
            None => {
                let (t, gap) = m.loss_trace.last().copied().unwrap_or((0, f64::NAN));
                println!("{name}: gap still {gap:.4} after {t} iterations");
            }
        }
    }
    Ok(())
}
