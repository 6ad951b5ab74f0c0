mod common;

use erw_core::backbone::Backbone;
use erw_core::experiment::{Lab, RunConfig};
use erw_core::objectives::AlignmentConfig;
use erw_core::trainer::{run_phase1, Arm, TrainState};
use erw_core::verify::{
    joint_score_decomposition_check, l2r_r2g_idealized_regression_check, marginal_consistency_check,
    run_oracle_suite, warmup_boundary_check, DiscreteToyWorld, RegressionConfig, VerifyOptions,
};
use erw_core::Error;
use proptest::prelude::*;

#[test]
fn decomposition_holds_on_the_four_latent_world() {
    let w = DiscreteToyWorld::four();
    let pts = w.sample_grid(20);
    let g = joint_score_decomposition_check(&w, &[0.1, 0.5, 0.9], &pts, 1e-5).unwrap();
    assert!(g.analytic <= 1e-10, "{g:?}");
    assert!(g.finite_difference <= 1e-6, "{g:?}");
    assert!(g.fd_vs_analytic <= 1e-6, "{g:?}");
    let m = marginal_consistency_check(&w, 0.5, &w.sample_grid(50)).unwrap();
    assert!(m.marginal <= 1e-12 && m.posterior_normalization <= 1e-12, "{m:?}");
}

#[test]
fn scores_are_not_interchangeable() {
    // The two components are genuinely different fields, so the identity is
    // not satisfied by swapping them or by dropping either one.
    let w = DiscreteToyWorld::four();
    let mut cg_vs_ri: f64 = 0.0;
    let mut ri_norm: f64 = 0.0;
    for z in w.sample_grid(20) {
        let s = w.scores(&z, 0.5, 0).unwrap();
        for k in 0..2 {
            cg_vs_ri = cg_vs_ri.max((s.conditional_generation[k] - s.representation_inference[k]).abs());
            ri_norm = ri_norm.max(s.representation_inference[k].abs());
        }
    }
    assert!(cg_vs_ri > 0.1 && ri_norm > 0.1);
}

#[test]
fn single_latent_world_has_only_the_generation_term() {
    let w = DiscreteToyWorld::single();
    for t in [0.1, 0.5, 0.9] {
        for z in w.sample_grid(20) {
            let s = w.scores(&z, t, 0).unwrap();
            assert!(s.representation_inference.iter().all(|v| v.abs() <= 1e-12));
        }
    }
}

#[test]
fn latent_without_posterior_mass_is_an_error() {
    let w = DiscreteToyWorld::four();
    assert!(matches!(w.scores(&[-6.0, -6.0], 0.01, 0), Err(Error::Degenerate(_))));
}

#[test]
fn fitted_regressors_reconstruct_the_joint_score() {
    let g = l2r_r2g_idealized_regression_check(&DiscreteToyWorld::four(), &RegressionConfig::default()).unwrap();
    assert!(g.lookup <= 1e-10, "{g:?}");
    assert!(g.mlp_sum < 0.1, "{g:?}");
    assert!(g.swapped_component > 10.0 * g.mlp_component, "{g:?}");
}

#[test]
fn oracle_suite_passes_and_flipped_sign_fails() {
    let ok = run_oracle_suite(VerifyOptions::default()).unwrap();
    assert!(ok.passed, "{}", ok.table());
    let bad = run_oracle_suite(VerifyOptions { flip_score_sign: true }).unwrap();
    assert!(!bad.passed);
    let failed: Vec<&str> = bad.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert!(failed.iter().all(|n| n.starts_with("sampler_oracle")), "{failed:?}");
}

#[test]
fn warmup_boundary_on_a_warmed_up_model() {
    let lab = Lab::open(RunConfig::desk(), None, true).unwrap();
    let model = Backbone::new(lab.config.backbone.clone(), 0).unwrap();
    let mut state = TrainState::new(model, Arm::Erw, 0, &lab.config.trainer).unwrap();
    run_phase1(&mut state, &lab.corpus, None).unwrap();
    let r = warmup_boundary_check(&state.model, &lab.evaluator.heldout, &AlignmentConfig::default(), 256, 0).unwrap();
    assert!(r.gap <= 1e-12, "{r:?}");
    assert!(r.monotone, "{r:?}");
    assert!(r.small_t_relative <= 0.1, "{r:?}");
}

#[test]
fn trainer_objective_matches_direct_evaluation_on_fresh_models() {
    let lab = common::tiny_lab();
    for seed in 0..5 {
        let model = Backbone::new(lab.config.backbone.clone(), seed).unwrap();
        let r = warmup_boundary_check(&model, &lab.corpus, &AlignmentConfig::default(), 32, seed).unwrap();
        assert!(r.gap <= 1e-12, "{r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decomposition_holds_on_random_worlds(
        seed in 0u64..10_000,
        t in 0.05f64..0.95,
        m in 2usize..6,
        labels in 1usize..4,
    ) {
        let mut r = erw_core::rng::stream(seed, 0);
        let latents: Vec<f64> = erw_core::rng::normals(&mut r, 2 * m).iter().map(|x| 2.0 * x).collect();
        let raw: Vec<f64> = (0..m).map(|i| 1.0 + ((seed as usize + i) % 3) as f64).collect();
        let total: f64 = raw.iter().sum();
        let prior: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let labs: Vec<usize> = (0..m).map(|i| i % labels).collect();
        let w = DiscreteToyWorld::new(2, latents, prior, labs).unwrap();
        let pts = w.sample_grid(10).into_iter().map(|p| p.iter().map(|x| x / 3.0).collect()).collect::<Vec<Vec<f64>>>();
        let g = joint_score_decomposition_check(&w, &[t], &pts, 1e-5).unwrap();
        prop_assert!(g.analytic <= 1e-10);
        let mc = marginal_consistency_check(&w, t, &pts).unwrap();
        prop_assert!(mc.marginal <= 1e-12 && mc.posterior_normalization <= 1e-10);
    }
}
