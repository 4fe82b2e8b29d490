mod common;

use pse_core::basis::BasisChoice;
use pse_core::gamma::{fit_gamma, fit_gamma_specs, weak_norm_sq};
use pse_core::pipeline::fit_gamma_stage;
use pse_core::simulation::{generate, DgpConfig};
use pse_core::PipelineConfig;

use common::*;

#[test]
fn mcar_odds_are_constant_three_sevenths() {
    let frac = mcar_recovery(5000, 3, BasisChoice::power(0));
    assert!(frac >= 0.9, "only {:.1}% of points within 0.05 of 3/7", 100.0 * frac);
}

#[test]
fn mcar_odds_concentrate_with_the_default_sieve() {
    // The 34-term sieve is too noisy at n=5000 for the pointwise band, but the
    // fit tightens around 3/7 as n grows.
    let odds = PipelineConfig::default().basis.odds;
    let small = mcar_recovery(5000, 3, odds.clone());
    let large = mcar_recovery(50_000, 3, odds);
    assert!(large > small && large >= 0.6, "{small} at n=5000, {large} at n=50000");
}

#[test]
fn gradient_matches_central_differences() {
    let worst = gradient_fd_worst(20, 17);
    assert!(worst <= 1e-5, "relative error {worst:e}");
}

#[test]
fn minimizer_dominates_warm_start_and_is_stationary() {
    let (_, observed) = generate(&DgpConfig { n: 2000, seed: 6, ..Default::default() }).unwrap();
    let cfg = PipelineConfig::default();
    let (q, p) = fit_gamma_specs(&observed, &cfg.basis.odds, &cfg.basis.projection).unwrap();
    let (model, report) = fit_gamma(&observed, &q, &p, &cfg.gamma).unwrap();
    assert!(!model.is_zero);
    let warm = &report.starts[2];
    assert!(report.q_n_value <= warm.start_q_n, "{} > {}", report.q_n_value, warm.start_q_n);
    assert!(report.grad_norm <= 1e-5, "grad norm {:e}", report.grad_norm);
    assert!(report.converged);
}

#[test]
fn weak_norm_is_bounded_by_l2_on_simulated_data() {
    let (full, observed) = generate(&DgpConfig { n: 800, seed: 10, ..Default::default() }).unwrap();
    let stage = fit_gamma_stage(&observed, &PipelineConfig::default()).unwrap();
    let est = stage.model.eval_records(&observed).unwrap();
    let truth = true_odds_values(&full, &observed);
    let p = stage.spec_p.as_ref().unwrap();
    let w = weak_norm_sq(&est, &truth, &observed, p).unwrap();
    let l2 = est.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / observed.n() as f64;
    assert!(w <= l2, "weak {w} > l2 {l2}");
    assert_eq!(weak_norm_sq(&est, &est, &observed, p).unwrap(), 0.0);
}

#[test]
fn weak_norm_shrinks_with_sample_size() {
    let small = median(&weak_norms(1000, 0..50));
    let large = median(&weak_norms(4000, 0..50));
    assert!(large < small, "median weak norm² n=1000 {small:e}, n=4000 {large:e}");
}
