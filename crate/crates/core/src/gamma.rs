//! Sieve minimum-distance estimation of the odds function
//! `γ(x, a, m̄, y) = P(R=0 | ·) / P(R=1 | ·)`.
//!
//! The shadow variable gives the conditional moment restriction
//! `E{Rγ - (1 - R) | z, x_obs, a, m̄, y} = 0`. Conditional expectations are
//! estimated by projecting onto the basis `p̄` of the always-observed variables,
//! and `γ` ranges over `exp(q̄'π)` with `q̄` a basis of the arguments of `γ`:
//!
//! `Q_n(π) = (1/n) ||H (r ∘ exp(q̄'π) + r - 1)||^2`.
//!
//! The linear index is passed through a soft cap so that `γ <= exp(linear_cap)`.
//! `Q_n` is a nonlinear least-squares objective; it is minimized by
//! Levenberg-Marquardt from several starting points.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, BasisChoice, BasisSpec};
use crate::data::Dataset;
use crate::error::{PseError, Result};
use crate::linalg::{weighted_least_squares, Projector};
use crate::stats::expit;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GammaOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub linear_cap: f64,
    /// Number of starting points (at least 1).
    pub restarts: usize,
    pub seed: u64,
}

impl Default for GammaOptions {
    fn default() -> Self {
        GammaOptions { max_iter: 300, grad_tol: 1e-5, linear_cap: 10.0, restarts: 3, seed: 0 }
    }
}

/// Width of the band below the cap where the soft clamp bends.
const CAP_BAND: f64 = 1.0;

/// Identity on `|u| <= cap - 1`, then a tanh shoulder that saturates at `±cap`.
/// Returns the clamped value and its derivative.
pub fn soft_cap(u: f64, cap: f64) -> (f64, f64) {
    let knee = (cap - CAP_BAND).max(0.0);
    let band = cap - knee;
    let a = u.abs();
    if a <= knee || band <= 0.0 {
        if band <= 0.0 {
            return (u.clamp(-cap, cap), if a < cap { 1.0 } else { 0.0 });
        }
        return (u, 1.0);
    }
    let t = ((a - knee) / band).tanh();
    (u.signum() * (knee + band * t), 1.0 - t * t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaModel {
    /// Basis over `(x, a, m̄, y)`; `None` for the identically-zero model.
    pub spec_q: Option<BasisSpec>,
    pub pi: Vec<f64>,
    pub linear_cap: f64,
    pub is_zero: bool,
}

impl GammaModel {
    /// `γ ≡ 0`, the reduction used when nothing is missing.
    pub fn zero() -> Self {
        GammaModel { spec_q: None, pi: Vec::new(), linear_cap: 0.0, is_zero: true }
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64> {
        match (&self.spec_q, self.is_zero) {
            (_, true) => Ok(0.0),
            (Some(spec), false) => {
                let b = spec.eval(point)?;
                let eta: f64 = b.iter().zip(&self.pi).map(|(x, c)| x * c).sum();
                Ok(soft_cap(eta, self.linear_cap).0.exp())
            }
            (None, false) => Err(PseError::Config("odds model without a basis".into())),
        }
    }

    /// `γ̂_i` for every record. Records with `r = 0` get 0: the odds function only
    /// ever enters multiplied by `R`.
    pub fn eval_records(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        let mut out = vec![0.0; dataset.n()];
        if self.is_zero {
            return Ok(out);
        }
        let rows = dataset.complete_indices();
        let spec = self.spec_q.as_ref().ok_or_else(|| PseError::Config("odds model without a basis".into()))?;
        let design = design_matrix(spec, &dataset.odds_rows(&rows)?)?;
        let eta = design * DVector::from_column_slice(&self.pi);
        for (o, &i) in rows.iter().enumerate() {
            out[i] = soft_cap(eta[o], self.linear_cap).0.exp();
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartOutcome {
    pub start_q_n: f64,
    pub q_n: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaFitReport {
    pub q_n_value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Index of the winning start (0 = zero vector, 1 = moment-matching
    /// intercept, 2 = logistic warm start, 3.. = perturbed warm starts).
    pub start_index: usize,
    pub starts: Vec<StartOutcome>,
    /// Complete cases whose linear index sits in the soft-clamp shoulder.
    pub clamp_events: usize,
    pub projection_ridge: f64,
    pub weak_norm_sq_vs: Option<f64>,
}

impl GammaFitReport {
    pub fn trivial() -> Self {
        GammaFitReport {
            q_n_value: 0.0,
            grad_norm: 0.0,
            iterations: 0,
            converged: true,
            start_index: 0,
            starts: Vec::new(),
            clamp_events: 0,
            projection_ridge: 0.0,
            weak_norm_sq_vs: None,
        }
    }
}

/// Precomputed pieces of `Q_n`: the reduced projection of the complete-case rows
/// and the constant contribution of the incomplete ones.
pub struct GammaProblem {
    n: usize,
    /// `q̄` evaluated at the complete cases (n_c × s).
    qmat: DMatrix<f64>,
    /// `T'` restricted to the complete cases (l × n_c).
    t_c: DMatrix<f64>,
    /// `T'(r - 1)`.
    offset: DVector<f64>,
    cap: f64,
    pub projection_ridge: f64,
}

impl GammaProblem {
    pub fn new(dataset: &Dataset, spec_q: &BasisSpec, spec_p: &BasisSpec, cap: f64) -> Result<Self> {
        let n = dataset.n();
        let rows = dataset.complete_indices();
        let qmat = design_matrix(spec_q, &dataset.odds_rows(&rows)?)?;
        let pmat = design_matrix(spec_p, &dataset.shadow_rows())?;
        let proj = Projector::new(&pmat)?;
        let t = proj.t();
        let l = t.ncols();
        let mut t_c = DMatrix::zeros(l, rows.len());
        for (o, &i) in rows.iter().enumerate() {
            for j in 0..l {
                t_c[(j, o)] = t[(i, j)];
            }
        }
        let r_minus_1 = DVector::from_iterator(n, dataset.records.iter().map(|r| f64::from(r.r) - 1.0));
        let offset = proj.reduce(&r_minus_1);
        Ok(GammaProblem { n, qmat, t_c, offset, cap, projection_ridge: proj.diagnostics.ridge })
    }

    pub fn dim(&self) -> usize {
        self.qmat.ncols()
    }

    pub fn n_complete(&self) -> usize {
        self.qmat.nrows()
    }

    fn gamma_and_slope(&self, pi: &DVector<f64>) -> (DVector<f64>, DVector<f64>, usize) {
        let eta = &self.qmat * pi;
        let mut g = DVector::zeros(eta.len());
        let mut dg = DVector::zeros(eta.len());
        let mut clamped = 0;
        for (i, &e) in eta.iter().enumerate() {
            let (c, d) = soft_cap(e, self.cap);
            if d < 1.0 {
                clamped += 1;
            }
            g[i] = c.exp();
            dg[i] = g[i] * d;
        }
        (g, dg, clamped)
    }

    /// Reduced residual `F(π)` with `Q_n = ||F||^2`.
    pub fn residual(&self, pi: &DVector<f64>) -> DVector<f64> {
        let (g, _, _) = self.gamma_and_slope(pi);
        (&self.t_c * g + &self.offset) / (self.n as f64).sqrt()
    }

    pub fn value(&self, pi: &DVector<f64>) -> f64 {
        self.residual(pi).norm_squared()
    }

    /// Residual and its Jacobian `∂F/∂π`.
    pub fn residual_jacobian(&self, pi: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (g, dg, _) = self.gamma_and_slope(pi);
        let scale = 1.0 / (self.n as f64).sqrt();
        let f = (&self.t_c * g + &self.offset) * scale;
        let mut weighted = self.qmat.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= dg[i] * scale;
        }
        (f, &self.t_c * weighted)
    }

    /// `∇Q_n = 2 J'F`.
    pub fn gradient(&self, pi: &DVector<f64>) -> DVector<f64> {
        let (f, j) = self.residual_jacobian(pi);
        j.transpose() * f * 2.0
    }

    pub fn clamp_count(&self, pi: &DVector<f64>) -> usize {
        self.gamma_and_slope(pi).2
    }

    /// Levenberg-Marquardt with multiplicative damping updates.
    fn minimize(&self, start: DVector<f64>, opts: &GammaOptions) -> (DVector<f64>, StartOutcome) {
        let mut pi = start;
        let (mut f, mut jac) = self.residual_jacobian(&pi);
        let start_q_n = f.norm_squared();
        let mut q = start_q_n;
        let mut lambda = 1e-3;
        let mut iterations = 0;
        let mut grad = jac.transpose() * &f * 2.0;
        let mut converged = grad.norm() <= opts.grad_tol;
        while !converged && iterations < opts.max_iter {
            iterations += 1;
            let jtj = jac.transpose() * &jac;
            let jtf = jac.transpose() * &f;
            let max_diag = jtj.diagonal().amax().max(1e-300);
            let mut accepted = false;
            for _ in 0..30 {
                let mut a = jtj.clone();
                for k in 0..a.nrows() {
                    a[(k, k)] += lambda * (jtj[(k, k)] + 1e-12 * max_diag);
                }
                let step = match a.cholesky() {
                    Some(ch) => -ch.solve(&jtf),
                    None => {
                        lambda *= 10.0;
                        continue;
                    }
                };
                let cand = &pi + &step;
                let q_new = self.value(&cand);
                if q_new.is_finite() && q_new < q {
                    pi = cand;
                    q = q_new;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    break;
                }
                lambda *= 4.0;
                if lambda > 1e16 {
                    break;
                }
            }
            (f, jac) = self.residual_jacobian(&pi);
            grad = jac.transpose() * &f * 2.0;
            converged = grad.norm() <= opts.grad_tol;
            if !accepted {
                break;
            }
        }
        let grad_norm = grad.norm();
        (pi, StartOutcome { start_q_n, q_n: q, grad_norm, iterations, converged })
    }
}

/// `Q_n(π)` for a dataset and pair of bases.
pub fn criterion_qn(pi: &[f64], dataset: &Dataset, spec_q: &BasisSpec, spec_p: &BasisSpec, cap: f64) -> Result<f64> {
    let prob = GammaProblem::new(dataset, spec_q, spec_p, cap)?;
    if pi.len() != prob.dim() {
        return Err(PseError::DimensionMismatch(format!("π has {} entries, basis has {}", pi.len(), prob.dim())));
    }
    Ok(prob.value(&DVector::from_column_slice(pi)))
}

/// Builds `q̄` (fitted on the complete-case odds arguments) and `p̄` (fitted on
/// the always-observed conditioning variables of every record).
pub fn fit_gamma_specs(dataset: &Dataset, q: &BasisChoice, p: &BasisChoice) -> Result<(BasisSpec, BasisSpec)> {
    let rows = dataset.complete_indices();
    let dims = dataset.dims();
    let spec_q = BasisSpec::fit_with_treatment(q, &dataset.odds_rows(&rows)?, Some(dims.x()))?;
    let spec_p = BasisSpec::fit_with_treatment(p, &dataset.shadow_rows(), Some(dims.z + dims.x_obs))?;
    if spec_p.dim() < spec_q.dim() {
        return Err(PseError::Config(format!(
            "projection basis has {} terms but the odds sieve has {}; need l_n >= s_n",
            spec_p.dim(),
            spec_q.dim()
        )));
    }
    Ok((spec_q, spec_p))
}

/// Logistic regression of `R` on the variables shared by `q̄` and `p̄`, mapped
/// onto `q̄` by least squares of the implied log-odds of missingness.
fn logistic_warm_start(dataset: &Dataset, spec_q: &BasisSpec, cap: f64) -> Result<DVector<f64>> {
    let dims = dataset.dims();
    let shadow = dataset.shadow_rows();
    let shared = shadow.columns(dims.z, shadow.ncols() - dims.z).into_owned();
    let choice = BasisChoice {
        kind: spec_q.kind,
        degree: spec_q.degree,
        include_interactions: spec_q.include_interactions,
        by_treatment: spec_q.stratify.is_some(),
    };
    let spec_s = BasisSpec::fit_with_treatment(&choice, &shared, Some(dims.x_obs))?;
    let x = design_matrix(&spec_s, &shared)?;
    let r = dataset.r();
    let beta = logistic_irls(&x, &r, cap)?;
    let logit = &x * beta;

    let rows = dataset.complete_indices();
    let qmat = design_matrix(spec_q, &dataset.odds_rows(&rows)?)?;
    let target: Vec<f64> = rows.iter().map(|&i| (-logit[i]).clamp(-cap, cap)).collect();
    let (pi, _) = weighted_least_squares(&qmat, &target, None)?;
    Ok(pi)
}

fn logistic_irls(x: &DMatrix<f64>, y: &[f64], cap: f64) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    let mut beta = DVector::zeros(p);
    for _ in 0..30 {
        let eta = x * &beta;
        let mut w = vec![0.0; n];
        let mut z = vec![0.0; n];
        for i in 0..n {
            let e = eta[i].clamp(-cap, cap);
            let mu = expit(e);
            let v = (mu * (1.0 - mu)).max(1e-10);
            w[i] = v;
            z[i] = e + (y[i] - mu) / v;
        }
        let (next, _) = weighted_least_squares(x, &z, Some(&w))?;
        let delta = (&next - &beta).amax();
        beta = next;
        if delta < 1e-8 {
            break;
        }
    }
    Ok(beta)
}

/// Minimizes `Q_n` over the exponential sieve. With no missing records the
/// identically-zero model is returned without optimization.
pub fn fit_gamma(
    dataset: &Dataset,
    spec_q: &BasisSpec,
    spec_p: &BasisSpec,
    opts: &GammaOptions,
) -> Result<(GammaModel, GammaFitReport)> {
    let n_complete = dataset.n_complete();
    if n_complete == dataset.n() {
        return Ok((GammaModel::zero(), GammaFitReport::trivial()));
    }
    if n_complete == 0 {
        return Err(PseError::DegenerateTarget);
    }
    if spec_p.dim() < spec_q.dim() {
        return Err(PseError::Config(format!(
            "projection basis has {} terms but the odds sieve has {}; need l_n >= s_n",
            spec_p.dim(),
            spec_q.dim()
        )));
    }
    let prob = GammaProblem::new(dataset, spec_q, spec_p, opts.linear_cap)?;
    let s = prob.dim();

    let n_missing = (dataset.n() - n_complete) as f64;
    let mut starts = vec![DVector::zeros(s)];
    let mut mm = DVector::zeros(s);
    mm[0] = (n_missing / n_complete as f64).ln();
    starts.push(mm.clone());
    let warm = logistic_warm_start(dataset, spec_q, opts.linear_cap).unwrap_or(mm);
    starts.push(warm.clone());
    for idx in 3..opts.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(idx as u64);
        let normal = Normal::new(0.0, 0.25).expect("valid normal");
        starts.push(DVector::from_iterator(s, warm.iter().map(|w| w + normal.sample(&mut rng))));
    }
    starts.truncate(opts.restarts.max(1));

    let mut best: Option<(usize, DVector<f64>)> = None;
    let mut outcomes: Vec<StartOutcome> = Vec::with_capacity(starts.len());
    for (idx, start) in starts.into_iter().enumerate() {
        let (pi, out) = prob.minimize(start, opts);
        let better = match &best {
            None => true,
            Some((b, _)) => {
                let cur = &outcomes[*b];
                out.q_n < cur.q_n || (out.q_n == cur.q_n && out.grad_norm < cur.grad_norm)
            }
        };
        outcomes.push(out);
        if better {
            best = Some((idx, pi));
        }
    }
    let (start_index, pi) = best.expect("at least one start");
    let win = &outcomes[start_index];
    let report = GammaFitReport {
        q_n_value: win.q_n,
        grad_norm: win.grad_norm,
        iterations: win.iterations,
        converged: win.converged,
        start_index,
        clamp_events: prob.clamp_count(&pi),
        projection_ridge: prob.projection_ridge,
        starts: outcomes,
        weak_norm_sq_vs: None,
    };
    let model = GammaModel {
        spec_q: Some(spec_q.clone()),
        pi: pi.iter().copied().collect(),
        linear_cap: opts.linear_cap,
        is_zero: false,
    };
    Ok((model, report))
}

/// Empirical weak norm `(1/n) ||H(r ∘ (g1 - g2))||^2` of the difference of two
/// odds functions evaluated on the sample.
pub fn weak_norm_sq(g1: &[f64], g2: &[f64], dataset: &Dataset, spec_p: &BasisSpec) -> Result<f64> {
    let n = dataset.n();
    if g1.len() != n || g2.len() != n {
        return Err(PseError::DimensionMismatch(format!(
            "value vectors have lengths {} and {}, dataset has {n} records",
            g1.len(),
            g2.len()
        )));
    }
    let pmat = design_matrix(spec_p, &dataset.shadow_rows())?;
    let proj = Projector::new(&pmat)?;
    let d = DVector::from_iterator(n, (0..n).map(|i| f64::from(dataset.records[i].r) * (g1[i] - g2[i])));
    Ok(proj.project(&d).norm_squared() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisKind;
    use crate::data::{Descriptor, ObservedRecord};

    fn toy_dataset(rs: &[u8]) -> Dataset {
        let records = rs
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let t = i as f64 / rs.len() as f64;
                ObservedRecord {
                    r,
                    z: vec![t.sin()],
                    x_miss: (r == 1).then(|| vec![t * t]),
                    x_obs: vec![],
                    a: (i % 2) as u8,
                    m: vec![vec![t.cos()]],
                    y: t + 0.3 * (i % 3) as f64,
                }
            })
            .collect();
        let desc = Descriptor {
            k: 1,
            z: vec!["z".into()],
            x_miss: vec!["x".into()],
            x_obs: vec![],
            mediators: vec![vec!["m".into()]],
            y: "y".into(),
        };
        Dataset::new(records, desc).unwrap()
    }

    #[test]
    fn soft_cap_shape() {
        assert_eq!(soft_cap(3.0, 10.0), (3.0, 1.0));
        assert_eq!(soft_cap(-9.0, 10.0), (-9.0, 1.0));
        let (v, d) = soft_cap(50.0, 10.0);
        assert!(v <= 10.0 && v > 9.99 && d < 1e-6);
        let (v, _) = soft_cap(-9.5, 10.0);
        assert!(v > -9.5 && v < -9.0);
    }

    #[test]
    fn intercept_only_criterion_is_squared_mean() {
        let ds = toy_dataset(&[1, 0, 1, 1]);
        let q = BasisSpec::identity(BasisKind::Power, 0, 4);
        let p = BasisSpec::identity(BasisKind::Power, 0, 4);
        let pi = 0.4;
        let g = f64::exp(pi);
        let v = [g + 1.0 - 1.0, -1.0, g, g];
        let mean = v.iter().sum::<f64>() / 4.0;
        let qn = criterion_qn(&[pi], &ds, &q, &p, 10.0).unwrap();
        assert!((qn - mean * mean).abs() < 1e-14);
    }

    #[test]
    fn exact_solution_gives_zero() {
        // one missing out of four: intercept solution exp(π) = 1/3
        let ds = toy_dataset(&[1, 0, 1, 1]);
        let q = BasisSpec::identity(BasisKind::Power, 0, 4);
        let p = BasisSpec::identity(BasisKind::Power, 0, 4);
        let qn = criterion_qn(&[(1.0f64 / 3.0).ln()], &ds, &q, &p, 10.0).unwrap();
        assert!(qn < 1e-28);
    }

    #[test]
    fn complete_data_returns_zero_model() {
        let ds = toy_dataset(&[1, 1, 1, 1, 1]);
        let (q, p) = fit_gamma_specs(&ds, &BasisChoice::power(1), &BasisChoice::power(1)).unwrap();
        let (m, rep) = fit_gamma(&ds, &q, &p, &GammaOptions::default()).unwrap();
        assert!(m.is_zero);
        assert_eq!(m.eval(&[0.1, 1.0, 0.2, 0.3]).unwrap(), 0.0);
        assert_eq!(rep.q_n_value, 0.0);
    }

    #[test]
    fn all_missing_is_degenerate() {
        let ds = toy_dataset(&[0, 0, 0]);
        let q = BasisSpec::identity(BasisKind::Power, 0, 4);
        let p = BasisSpec::identity(BasisKind::Power, 0, 4);
        assert!(matches!(fit_gamma(&ds, &q, &p, &GammaOptions::default()), Err(PseError::DegenerateTarget)));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let rs: Vec<u8> = (0..40).map(|i| u8::from(i % 3 != 0)).collect();
        let ds = toy_dataset(&rs);
        let (q, p) = fit_gamma_specs(&ds, &BasisChoice::power(1), &BasisChoice::power(2)).unwrap();
        let prob = GammaProblem::new(&ds, &q, &p, 10.0).unwrap();
        let pi = DVector::from_iterator(prob.dim(), (0..prob.dim()).map(|j| 0.1 * ((j as f64) - 2.0)));
        let g = prob.gradient(&pi);
        for j in 0..prob.dim() {
            let h = 1e-6;
            let mut up = pi.clone();
            up[j] += h;
            let mut dn = pi.clone();
            dn[j] -= h;
            let fd = (prob.value(&up) - prob.value(&dn)) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-5 * g.amax().max(1e-8), "j={j} fd={fd} g={}", g[j]);
        }
    }

    #[test]
    fn weak_norm_basics() {
        let rs: Vec<u8> = (0..20).map(|i| u8::from(i % 4 != 0)).collect();
        let ds = toy_dataset(&rs);
        let (_, p) = fit_gamma_specs(&ds, &BasisChoice::power(1), &BasisChoice::power(1)).unwrap();
        let g1: Vec<f64> = (0..20).map(|i| 0.2 + 0.01 * i as f64).collect();
        assert_eq!(weak_norm_sq(&g1, &g1, &ds, &p).unwrap(), 0.0);
        let g2: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).cos()).collect();
        let w = weak_norm_sq(&g1, &g2, &ds, &p).unwrap();
        let l2 = (0..20).map(|i| f64::from(rs[i]) * (g1[i] - g2[i]).powi(2)).sum::<f64>() / 20.0;
        assert!(w <= l2 + 1e-15);
        assert!(weak_norm_sq(&g1[..5], &g2, &ds, &p).is_err());
    }
}
