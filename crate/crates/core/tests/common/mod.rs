//! Oracles and property checks shared by the integration tests and the
//! acceptance harness. Nothing here calls back into the simulation code for
//! the quantities it checks: the true odds and the brute-force representer are
//! computed independently.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pse_core::basis::BasisChoice;
use pse_core::data::{Dataset, ObservedRecord};
use pse_core::estimator::{fit_mu_chain_prepared, mu_orthogonality};
use pse_core::gamma::{fit_gamma_specs, weak_norm_sq, GammaProblem};
use pse_core::inference::{fit_omegas_prepared, RepresenterSystem, DEFAULT_OMEGA_FLOOR};
use pse_core::pipeline::{fit_gamma_stage, Engine};
use pse_core::simulation::{generate, DgpConfig};
use pse_core::{Estimand, PipelineConfig, TreatmentProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TRUE_NDE: f64 = 0.4569689725348063;
pub const TRUE_NIE1: f64 = -1.0;
pub const TRUE_NIE2: f64 = 0.4193953882637196;
pub const TRUE_TE: f64 = -0.12363563920147413;
pub const TRUE_PSI_111: f64 = 3.959697694131859;

/// Frozen truth in decomposition order NDE, NIE1, NIE2, TE.
pub const TRUTH: [f64; 4] = [TRUE_NDE, TRUE_NIE1, TRUE_NIE2, TRUE_TE];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// True odds `P(R=0 | x, a, m̄, y) / P(R=1 | ·)` of the simulation design,
/// written out from the structural equations: the response model is logistic
/// in `(x, a·ε₃, a·ε₄, ε₅)` and each `ε` is the residual of its equation.
pub fn true_odds(rec: &ObservedRecord, x1: f64) -> f64 {
    let (x2, x3) = (rec.x_obs[0], rec.x_obs[1]);
    let a = f64::from(rec.a);
    let (m1, m2, y) = (rec.m[0][0], rec.m[1][0], rec.y);
    let e3 = m1 - (-1.0 + 0.5 * a - 2.0 * x1.sin() + 3.0 * x1 * x1 - 2.0 * x2 + x3);
    let e4 = m2 - (1.0 - 0.5 * a + x1 + x2 * x2 - x3 - 0.5 * a * m1);
    let e5 = y
        - (-1.0 + 0.5 * a - 1.5 * m1 + 1.5 * m2 + 3.0 * x1 + 3.0 * x1 * x1 - 3.0 * x2.sin() + x2 * x2 - x3
            + 0.5 * a * m1
            + 0.5 * a * m2);
    let eta = 0.1 - 2.0 * x1 + 1.5 * x2 + x3 + 0.5 * a * e3 - 0.5 * a * e4 - 0.1 * e5;
    (-eta).exp()
}

/// True odds on the complete cases of `observed`, 0 elsewhere.
pub fn true_odds_values(full: &Dataset, observed: &Dataset) -> Vec<f64> {
    observed
        .records
        .iter()
        .zip(&full.records)
        .map(|(o, f)| if o.r == 1 { true_odds(o, f.x_miss.as_ref().unwrap()[0]) } else { 0.0 })
        .collect()
}

/// Replaces the response indicator with an independent Bernoulli(`p_obs`).
pub fn mcar(full: &Dataset, p_obs: f64, seed: u64) -> Dataset {
    let mut g = rng(seed);
    let records = full
        .records
        .iter()
        .map(|rec| {
            if g.random::<f64>() < p_obs {
                rec.clone()
            } else {
                ObservedRecord { r: 0, x_miss: None, ..rec.clone() }
            }
        })
        .collect();
    Dataset::new(records, full.descriptor.clone()).unwrap()
}

pub fn all_profiles() -> Vec<TreatmentProfile> {
    (0..8u8).map(|b| TreatmentProfile::new(vec![b >> 2 & 1, b >> 1 & 1, b & 1], 2).unwrap()).collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OrthogonalityCheck {
    pub instances: usize,
    pub mu_fits: usize,
    pub omega_fits: usize,
    pub worst_mu: f64,
    pub worst_omega: f64,
    /// Fits that needed a ridge; the bound only applies to unridged fits.
    pub ridged: usize,
}

/// Fits `γ̂`, then every `μ̂_k` and `ω̂_k` for all eight profiles on `count`
/// random small simulated samples, and records the largest normal-equation
/// violation of each family.
pub fn orthogonality_on_random_instances(count: usize, seed: u64) -> OrthogonalityCheck {
    let mut g = rng(seed);
    let cfg = PipelineConfig::default();
    let mut out = OrthogonalityCheck::default();
    while out.instances < count {
        let n = g.random_range(150..400);
        let dgp = DgpConfig { n, seed: g.random(), alpha: g.random_range(0.3..0.9), ..Default::default() };
        let (_, observed) = generate(&dgp).unwrap();
        let Ok(stage) = fit_gamma_stage(&observed, &cfg) else { continue };
        let Ok(engine) = Engine::new(&observed, &stage, &cfg) else { continue };
        let prep = engine.prepared();
        out.instances += 1;
        for p in all_profiles() {
            let fits = fit_mu_chain_prepared(prep, &stage.model, &p).unwrap();
            for (k, v) in mu_orthogonality(prep, &fits).into_iter().enumerate() {
                out.mu_fits += 1;
                if fits.mu[k].gram_diag_ridge > 0.0 {
                    out.ridged += 1;
                } else {
                    out.worst_mu = out.worst_mu.max(v);
                }
            }
            let om = fit_omegas_prepared(prep, &p, DEFAULT_OMEGA_FLOOR).unwrap();
            for (k, v) in om.moment_residuals.iter().enumerate() {
                if om.identically_one[k] {
                    continue;
                }
                out.omega_fits += 1;
                if om.omega[k].as_ref().unwrap().gram_diag_ridge > 0.0 {
                    out.ridged += 1;
                } else {
                    out.worst_omega = out.worst_omega.max(*v);
                }
            }
        }
    }
    out
}

/// Largest relative error `|∇Q_n - FD|_∞ / |∇Q_n|_∞` over `points` random
/// coefficient vectors, with central differences.
pub fn gradient_fd_worst(points: usize, seed: u64) -> f64 {
    let (_, observed) = generate(&DgpConfig { n: 600, seed, ..Default::default() }).unwrap();
    let cfg = PipelineConfig::default();
    let (q, p) = fit_gamma_specs(&observed, &cfg.basis.odds, &cfg.basis.projection).unwrap();
    let prob = GammaProblem::new(&observed, &q, &p, cfg.gamma.linear_cap).unwrap();
    let mut g = rng(seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let pi = DVector::from_iterator(prob.dim(), (0..prob.dim()).map(|_| g.random_range(-0.3..0.3)));
        let grad = prob.gradient(&pi);
        let mut err: f64 = 0.0;
        for j in 0..prob.dim() {
            let h = 1e-5;
            let (mut up, mut dn) = (pi.clone(), pi.clone());
            up[j] += h;
            dn[j] -= h;
            let fd = (prob.value(&up) - prob.value(&dn)) / (2.0 * h);
            err = err.max((fd - grad[j]).abs());
        }
        worst = worst.max(err / grad.amax());
    }
    worst
}

/// Fraction of complete cases with `|γ̂ - 3/7| ≤ 0.05` under MCAR with
/// `P(R=1) = 0.7`.
pub fn mcar_recovery(n: usize, seed: u64, odds: BasisChoice) -> f64 {
    let (full, _) = generate(&DgpConfig { n, seed, ..Default::default() }).unwrap();
    let ds = mcar(&full, 0.7, seed + 1);
    let mut cfg = PipelineConfig::default();
    cfg.basis.odds = odds;
    let stage = fit_gamma_stage(&ds, &cfg).unwrap();
    let g = stage.model.eval_records(&ds).unwrap();
    let rows = ds.complete_indices();
    rows.iter().filter(|&&i| (g[i] - 3.0 / 7.0).abs() <= 0.05).count() as f64 / rows.len() as f64
}

/// `|TE - (NDE + NIE1 + NIE2)|` from one analysis.
pub fn decomposition_gap(n: usize, seed: u64) -> f64 {
    let (_, observed) = generate(&DgpConfig { n, seed, ..Default::default() }).unwrap();
    let an = pse_core::analyze(&observed, &PipelineConfig::default(), &Estimand::decomposition(2)).unwrap();
    let e: Vec<f64> = an.estimands.iter().map(|e| e.estimate()).collect();
    (e[3] - (e[0] + e[1] + e[2])).abs()
}

/// Largest difference in point estimate or standard error between SRI,
/// Oracle and CCA on a fully observed sample.
pub fn full_data_reduction_gap(n: usize, seed: u64) -> f64 {
    use pse_core::baselines::{cca_estimate, oracle_estimate};
    let (full, _) = generate(&DgpConfig { n, seed, ..Default::default() }).unwrap();
    let cfg = PipelineConfig::default();
    let es = Estimand::decomposition(2);
    let sri = pse_core::analyze(&full, &cfg, &es).unwrap();
    assert!(sri.gamma_is_zero);
    let oracle = oracle_estimate(&full, &cfg, &es).unwrap();
    let cca = cca_estimate(&full, &cfg, &es).unwrap();
    let mut gap: f64 = 0.0;
    for other in [&oracle, &cca] {
        for (a, b) in sri.estimands.iter().zip(&other.estimands) {
            gap = gap.max((a.estimate() - b.estimate()).abs());
            gap = gap.max((a.report.se() - b.report.se()).abs());
        }
    }
    gap
}

/// Closed-form representer against an independent dense solve of the same
/// quadratic on a 20-record sample. The criterion is quadratic in the
/// coefficients, so its gradient and Hessian are recovered exactly (up to
/// rounding) from unit-step differences, and the minimizer is then found by
/// an LU solve that shares nothing with the library's QR path. Returns the
/// largest coefficient difference, relative to `max(1, ‖coef‖∞)`, and the
/// criterion difference.
pub fn representer_vs_brute_force(seed: u64) -> (f64, f64) {
    let (_, observed) = generate(&DgpConfig { n: 20, seed, ..Default::default() }).unwrap();
    let (q, p) = fit_gamma_specs(&observed, &BasisChoice::additive(1), &BasisChoice::additive(1)).unwrap();
    let sys = RepresenterSystem::new(&observed, &q, &p).unwrap();
    let mut g = rng(seed);
    let phi: Vec<f64> =
        observed.records.iter().map(|r| if r.r == 1 { g.random_range(-2.0..2.0) } else { 0.0 }).collect();
    let closed = sys.solve(&phi).unwrap();
    assert_eq!(closed.diagnostics.ridge, 0.0, "toy representer system should not need a ridge");

    let s = q.dim();
    let f = |b: &DVector<f64>| sys.criterion(b, &phi);
    let zero = DVector::zeros(s);
    let f0 = f(&zero);
    let unit = |j: usize| {
        let mut e = DVector::zeros(s);
        e[j] = 1.0;
        e
    };
    let mut hess = DMatrix::zeros(s, s);
    let mut grad = DVector::zeros(s);
    for i in 0..s {
        let (fp, fm) = (f(&unit(i)), f(&(-unit(i))));
        grad[i] = (fp - fm) / 2.0;
        hess[(i, i)] = fp - 2.0 * f0 + fm;
        for j in 0..i {
            let fij = f(&(unit(i) + unit(j)));
            let v = fij - f(&unit(i)) - f(&unit(j)) + f0;
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let brute = hess.lu().solve(&(-grad)).expect("positive definite toy quadratic");
    let scale = closed.coef.iter().fold(1.0_f64, |m, c| m.max(c.abs()));
    let coef_gap = brute.iter().zip(&closed.coef).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
    (coef_gap, (f(&brute) - closed.criterion).abs())
}

/// `weak_norm_sq(γ̂, γ_true)` for each seed at sample size `n`.
pub fn weak_norms(n: usize, seeds: std::ops::Range<u64>) -> Vec<f64> {
    use rayon::prelude::*;
    let cfg = PipelineConfig::default();
    seeds
        .into_par_iter()
        .map(|seed| {
            let (full, observed) = generate(&DgpConfig { n, seed, ..Default::default() }).unwrap();
            let stage = fit_gamma_stage(&observed, &cfg).unwrap();
            let est = stage.model.eval_records(&observed).unwrap();
            let truth = true_odds_values(&full, &observed);
            weak_norm_sq(&est, &truth, &observed, stage.spec_p.as_ref().unwrap()).unwrap()
        })
        .collect()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}
