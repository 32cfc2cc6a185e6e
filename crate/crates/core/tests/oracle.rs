mod common;

use rpr_core::cli::cmd_oracle_compare;
use rpr_core::cli::config::RunConfig;
use rpr_core::oracle::{brute_force_minlp, TinyProblem};
use rpr_core::quantize::LevelSet;
use rpr_core::Error;

#[test]
fn enumeration_recovers_the_planted_assignment() {
    for seed in 0..5 {
        let (p, q0) = TinyProblem::realizable(20, 5, 0.7, LevelSet::ternary(), seed);
        let sol = brute_force_minlp(&p).unwrap();
        // the planted point has zero loss; any other minimizer must too
        assert!(sol.loss < 1e-20, "seed {seed}: {}", sol.loss);
        assert!(p.loss(&q0, 0.7) < 1e-20);
    }
}

#[test]
fn enumeration_beats_every_single_flip() {
    let p = TinyProblem::random(16, 4, 0.3, LevelSet::ternary(), 11);
    let sol = brute_force_minlp(&p).unwrap();
    for i in 0..4 {
        for &l in LevelSet::ternary().levels() {
            let mut q = sol.assignment.clone();
            q[i] = l;
            assert!(p.best_scale(&q).1 >= sol.loss);
        }
    }
}

#[test]
fn enumeration_guard_trips_above_ten_million() {
    // 3^15 ≈ 1.4e7
    let p = TinyProblem::random(4, 15, 0.1, LevelSet::ternary(), 0);
    assert!(matches!(brute_force_minlp(&p), Err(Error::EnumerationGuard(_))));
    let q = TinyProblem::random(4, 14, 0.1, LevelSet::ternary(), 0);
    assert_eq!(q.dim(), 14);
}

#[test]
fn oracle_config_lands_near_the_optimum() {
    let cfg = RunConfig::load(&common::config_path("oracle_tiny.toml")).unwrap();
    let report = cmd_oracle_compare(&cfg, None).unwrap();
    assert!(report.ratio >= 1.0 - 1e-12);
    assert!(report.ratio <= 1.05, "ratio {}", report.ratio);
    assert!(report.rpr_assignment.iter().all(|v| LevelSet::ternary().contains(*v)));
}

#[test]
fn realizable_problem_reaches_ratio_one() {
    let mut cfg = RunConfig::load(&common::config_path("oracle_tiny.toml")).unwrap();
    cfg.oracle.problem = rpr_core::cli::config::ProblemKind::Realizable;
    let report = cmd_oracle_compare(&cfg, None).unwrap();
    assert!(report.ratio <= 1.0 + 1e-6, "{report:?}");
}

#[test]
fn ratio_clamps_numerical_zeros() {
    use rpr_core::cli::loss_ratio;
    assert_eq!(loss_ratio(4e-23, 4e-30, 1e-12), 1.0);
    assert_eq!(loss_ratio(0.75, 0.5, 1e-12), 1.5);
}
