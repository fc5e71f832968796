use gradfabric::simlab::{run_convergence_lab, DelayModel, EtaMode, SgdLabConfig};

fn arm(seed: u64, epsilon: u32, c: f64, noise: f64, kappa: f64) -> Option<u64> {
    let cfg = SgdLabConfig {
        dimension: 20,
        condition_number: kappa,
        c,
        delay: DelayModel::Synthetic { tau_bar: 16, epsilon },
        eta_mode: EtaMode::Fixed,
        noise_std: noise,
        iterations: 300_000,
        seed,
        target_gap: 1e-3,
        ..SgdLabConfig::default()
    };
    run_convergence_lab(&cfg).unwrap().iterations_to_target
}

#[test]
#[ignore]
fn probe() {
    for (c, noise, kappa) in [
        (0.03, 0.01, 1.0),
        (0.04, 0.01, 1.0),
        (0.03, 0.05, 1.0),
        (0.03, 0.01, 2.0),
    ] {
        let mut wins = 0;
        let mut ratios = Vec::new();
        for seed in 1..=10u64 {
            let a = arm(seed, 2, c, noise, kappa);
            let b = arm(seed, 16, c, noise, kappa);
            if let (Some(a), Some(b)) = (a, b) {
                if a < b {
                    wins += 1;
                }
                ratios.push(a as f64 / b as f64);
            } else {
                println!("  seed {seed}: a={a:?} b={b:?}");
            }
        }
        ratios.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let med = ratios.get(ratios.len() / 2).copied().unwrap_or(f64::NAN);
        println!(
            "c={c} noise={noise} kappa={kappa}: wins {wins}/10, median ratio {med:.3}, ratios {:?}",
            ratios.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>()
        );
    }
}
