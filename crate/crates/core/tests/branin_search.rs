//! Paired comparison on the discretized Branin objective: after a shared
//! random warm-up, GP-guided search must beat continued random search on
//! median best loss across seeds, with a one-sided sign test backing it up.

use slicetune_core::bench::{branin_space, sign_test_p, BraninObjective};
use slicetune_core::optimizer::{run_adaptive, run_random, Ledger, SearchConfig};

fn best_loss(ledger: &Ledger) -> f64 {
    ledger.best_ok().expect("ok trials").loss
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[test]
fn adaptive_beats_continued_random_on_branin() {
    let start = std::time::Instant::now();
    let side = 32;
    let space = branin_space(side);

    let mut adaptive_best = Vec::new();
    let mut random_best = Vec::new();
    for seed in 0..20u64 {
        let cfg = SearchConfig {
            seed,
            ..SearchConfig::default()
        };
        let mut warm = Ledger::new();
        run_random(
            &space,
            &mut BraninObjective::new(side),
            10,
            &cfg,
            &mut warm,
            &mut |_| Ok(()),
        )
        .unwrap();

        let mut arm_a = warm.clone();
        run_adaptive(
            &space,
            &mut BraninObjective::new(side),
            30,
            &cfg,
            &mut arm_a,
            &mut |_| Ok(()),
        )
        .unwrap();

        let mut arm_b = warm;
        run_random(
            &space,
            &mut BraninObjective::new(side),
            30,
            &cfg,
            &mut arm_b,
            &mut |_| Ok(()),
        )
        .unwrap();

        adaptive_best.push(best_loss(&arm_a));
        random_best.push(best_loss(&arm_b));
    }

    let med_a = median(&mut adaptive_best.clone());
    let med_b = median(&mut random_best.clone());
    assert!(
        med_a < med_b,
        "adaptive median {med_a} not below random median {med_b}"
    );

    let mut wins = 0;
    let mut losses = 0;
    for (a, b) in adaptive_best.iter().zip(&random_best) {
        if a < b {
            wins += 1;
        } else if a > b {
            losses += 1;
        }
    }
    let p = sign_test_p(wins, losses);
    assert!(
        p < 0.05,
        "sign test p = {p} ({wins} wins, {losses} losses)"
    );

    assert!(
        start.elapsed().as_secs_f64() < 60.0,
        "comparison too slow: {:?}",
        start.elapsed()
    );
}
