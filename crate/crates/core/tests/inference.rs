mod common;

use pse_core::basis::BasisChoice;
use pse_core::estimator::{build_mu_specs, fit_mu_chain_prepared, Prepared};
use pse_core::inference::{fit_omegas, fit_omegas_prepared, phi_values, RepresenterSystem, DEFAULT_OMEGA_FLOOR};
use pse_core::gamma::fit_gamma_specs;
use pse_core::pipeline::{Engine, GammaStage};
use pse_core::simulation::{closed_form_psi, generate, DgpConfig};
use pse_core::{analyze, Dataset, Descriptor, Estimand, GammaModel, ObservedRecord, PipelineConfig, TreatmentProfile};
use rand::Rng;
use rayon::prelude::*;

use common::*;

#[test]
fn constant_profile_makes_later_weights_one() {
    let (_, observed) = generate(&DgpConfig { n: 300, seed: 1, ..Default::default() }).unwrap();
    let specs = build_mu_specs(&observed, &BasisChoice::additive(2)).unwrap();
    for level in [0, 1] {
        let p = TreatmentProfile::constant(level, 2);
        let om = fit_omegas(&observed, &GammaModel::zero(), &p, &specs).unwrap();
        assert_eq!(om.identically_one, vec![false, true, true]);
        let rec = observed.records.iter().find(|r| r.r == 1).unwrap();
        let x: Vec<f64> = rec.x_miss.iter().flatten().chain(&rec.x_obs).copied().collect();
        let point2: Vec<f64> = x.iter().copied().chain(rec.m[0].iter().copied()).collect();
        assert_eq!(om.omega_at(2, &point2).unwrap(), 1.0);
    }
}

fn randomized_dataset(n: usize, seed: u64) -> Dataset {
    let mut g = rng(seed);
    let records: Vec<ObservedRecord> = (0..n)
        .map(|_| {
            let x: f64 = g.random();
            ObservedRecord {
                r: 1,
                z: vec![x],
                x_miss: Some(vec![x]),
                x_obs: vec![g.random()],
                a: u8::from(g.random_bool(0.5)),
                m: vec![vec![x + g.random::<f64>()]],
                y: g.random(),
            }
        })
        .collect();
    let desc = Descriptor {
        k: 1,
        z: vec!["z".into()],
        x_miss: vec!["x".into()],
        x_obs: vec!["w".into()],
        mediators: vec![vec!["m".into()]],
        y: "y".into(),
    };
    Dataset::new(records, desc).unwrap()
}

/// Share of records whose `ω̂_1` lies within 0.1 of 2.
fn share_near_two(ds: &Dataset, basis: &BasisChoice) -> f64 {
    let specs = build_mu_specs(ds, basis).unwrap();
    let p = TreatmentProfile::new(vec![1, 1], 1).unwrap();
    let om = fit_omegas(ds, &GammaModel::zero(), &p, &specs).unwrap();
    let close = ds
        .records
        .iter()
        .filter(|r| {
            let pt = [r.x_miss.as_ref().unwrap()[0], r.x_obs[0]];
            (om.omega_at(1, &pt).unwrap() - 2.0).abs() <= 0.1
        })
        .count();
    close as f64 / ds.n() as f64
}

#[test]
fn randomized_treatment_gives_inverse_half_weight() {
    let share = share_near_two(&randomized_dataset(5000, 40), &BasisChoice::power(0));
    assert!(share >= 0.9, "{share}");
}

#[test]
fn randomized_treatment_weight_with_cubic_basis_at_large_n() {
    // Seven coefficients leave too much pointwise noise at n=5000; the band
    // holds once the sample is ten times larger.
    let share = share_near_two(&randomized_dataset(50_000, 41), &BasisChoice::additive(3));
    assert!(share >= 0.9, "{share}");
}

#[test]
fn weight_moment_residuals_vanish() {
    let (_, observed) = generate(&DgpConfig { n: 1500, seed: 2, ..Default::default() }).unwrap();
    let cfg = PipelineConfig::default();
    let stage = pse_core::pipeline::fit_gamma_stage(&observed, &cfg).unwrap();
    let engine = Engine::new(&observed, &stage, &cfg).unwrap();
    for p in all_profiles() {
        let om = fit_omegas_prepared(engine.prepared(), &p, DEFAULT_OMEGA_FLOOR).unwrap();
        for (k, r) in om.moment_residuals.iter().enumerate() {
            assert!(*r <= 1e-6, "profile {p} stage {}: {r:e}", k + 1);
        }
    }
}

#[test]
fn true_odds_weighting_recovers_psi() {
    // E{R(1+γ)φ} = ψ holds with the true odds whatever the weights, as long as
    // the regressions are consistent.
    let (full, observed) = generate(&DgpConfig { n: 20_000, seed: 3, ..Default::default() }).unwrap();
    let specs = build_mu_specs(&observed, &PipelineConfig::default().basis.regression).unwrap();
    let mut prep = Prepared::new(&observed, &GammaModel::zero(), &specs).unwrap();
    let truth = true_odds_values(&full, &observed);
    for (o, &i) in prep.rows.clone().iter().enumerate() {
        prep.gamma[i] = truth[i];
        prep.one_plus_gamma[o] = 1.0 + truth[i];
    }
    for p in [TreatmentProfile::new(vec![1, 1, 1], 2).unwrap(), TreatmentProfile::new(vec![0, 1, 0], 2).unwrap()] {
        let fits = fit_mu_chain_prepared(&prep, &GammaModel::zero(), &p).unwrap();
        let om = fit_omegas_prepared(&prep, &p, DEFAULT_OMEGA_FLOOR).unwrap();
        let phi = phi_values(&prep, &fits, &om);
        let terms: Vec<f64> = (0..prep.n).map(|i| if truth[i] > 0.0 { (1.0 + truth[i]) * phi[i] } else { 0.0 }).collect();
        let n = prep.n as f64;
        let mean = terms.iter().sum::<f64>() / n;
        let sd = (terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = closed_form_psi(&DgpConfig::default(), &p).unwrap();
        assert!((mean - target).abs() <= 3.0 * sd / n.sqrt(), "profile {p}: {mean} vs {target} (sd {sd})");
    }
}

#[test]
fn representer_of_zero_is_zero_and_criterion_nonpositive() {
    let (_, observed) = generate(&DgpConfig { n: 300, seed: 4, ..Default::default() }).unwrap();
    let cfg = PipelineConfig::default();
    let (q, p) = fit_gamma_specs(&observed, &cfg.basis.odds, &cfg.basis.projection).unwrap();
    let sys = RepresenterSystem::new(&observed, &q, &p).unwrap();
    let zero = sys.solve(&vec![0.0; observed.n()]).unwrap();
    assert!(zero.coef.iter().all(|&c| c == 0.0));
    assert!(zero.projected.iter().all(|&c| c == 0.0));
    let mut g = rng(4);
    let phi: Vec<f64> = observed.records.iter().map(|r| if r.r == 1 { g.random_range(-3.0..3.0) } else { 0.0 }).collect();
    assert!(sys.solve(&phi).unwrap().criterion <= 0.0);
}

#[test]
fn representer_matches_brute_force() {
    for seed in [21, 22, 23] {
        let (coef, crit) = representer_vs_brute_force(seed);
        assert!(coef <= 1e-6 && crit <= 1e-6, "seed {seed}: coef {coef:e} criterion {crit:e}");
    }
}

#[test]
fn complete_data_influence_is_phi_minus_psi() {
    let (full, _) = generate(&DgpConfig { n: 400, seed: 5, ..Default::default() }).unwrap();
    let cfg = PipelineConfig::default();
    let stage = GammaStage::zero();
    let mut engine = Engine::new(&full, &stage, &cfg).unwrap();
    let inf = engine.profile(&TreatmentProfile::new(vec![0, 1, 1], 2).unwrap()).unwrap();
    let psi = inf.report.psi_hat;
    for (v, phi) in inf.report.if_values.iter().zip(&inf.phi) {
        assert!((v - (phi - psi)).abs() < 1e-12);
    }
}

#[test]
fn identical_records_give_identical_influence() {
    let (_, observed) = generate(&DgpConfig { n: 400, seed: 7, ..Default::default() }).unwrap();
    let mut records = observed.records.clone();
    let missing = records.iter().position(|r| r.r == 0).unwrap();
    let complete = records.iter().position(|r| r.r == 1).unwrap();
    records.push(records[missing].clone());
    records.push(records[complete].clone());
    let ds = Dataset::new(records, observed.descriptor.clone()).unwrap();
    let cfg = PipelineConfig::default();
    let stage = pse_core::pipeline::fit_gamma_stage(&ds, &cfg).unwrap();
    let mut engine = Engine::new(&ds, &stage, &cfg).unwrap();
    let r = &engine.profile(&TreatmentProfile::new(vec![0, 1, 1], 2).unwrap()).unwrap().report;
    let n = ds.n();
    // equal up to summation order inside the projections
    for (i, j) in [(missing, n - 2), (complete, n - 1)] {
        assert!((r.if_values[i] - r.if_values[j]).abs() <= 1e-12, "{} vs {}", r.if_values[i], r.if_values[j]);
    }
}

#[test]
fn influence_values_are_centered() {
    let cfg = PipelineConfig::default();
    let es = [Estimand::Psi(TreatmentProfile::new(vec![0, 0, 1], 2).unwrap())];
    let ok: usize = (0..100u64)
        .into_par_iter()
        .map(|seed| {
            let (_, observed) = generate(&DgpConfig { n: 2000, seed: 500 + seed, ..Default::default() }).unwrap();
            let an = analyze(&observed, &cfg, &es).unwrap();
            let r = &an.estimands[0].report;
            let mean = r.diagnostics.mean_if;
            let sd = (r.if_values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r.n as f64 - 1.0)).sqrt();
            usize::from(mean.abs() <= 2.0 * sd / (r.n as f64).sqrt())
        })
        .sum();
    assert!(ok >= 90, "{ok} of 100 seeds centered");
}

#[test]
fn interval_width_halves_when_data_are_quadrupled() {
    let (_, observed) = generate(&DgpConfig { n: 500, seed: 6, ..Default::default() }).unwrap();
    let quad = Dataset::new(
        (0..4).flat_map(|_| observed.records.iter().cloned()).collect(),
        observed.descriptor.clone(),
    )
    .unwrap();
    let cfg = PipelineConfig::default();
    let es = [Estimand::Nde];
    let w = |ds: &Dataset| {
        let r = &analyze(ds, &cfg, &es).unwrap().estimands[0].report;
        assert!(r.sigma2_hat >= 0.0);
        r.ci_hi - r.ci_lo
    };
    let ratio = w(&quad) / w(&observed);
    assert!((ratio - 0.5).abs() <= 1e-10 * 0.5, "ratio {ratio}");
}
