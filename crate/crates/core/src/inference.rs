//! Influence-function inference for `ψ̂` and its contrasts.
//!
//! Per profile this fits the density-ratio weights `ω_k`, assembles `φ̂`, solves
//! the quadratic representer problem for `ϱ̂` over the linear span of `q̄`, and
//! evaluates
//!
//! `IF_i = R_i (1 + γ̂_i) φ̂_i - ψ̂ - Ê{Rϱ̂ | z, x_obs, a, m̄, y}_i (R_i γ̂_i - 1 + R_i)`.
//!
//! The variance estimate is `mean(IF²)` and intervals are `ψ̂ ∓ z σ̂ / √n`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, BasisSpec};
use crate::data::{covariate_vector, Dataset, ObservedRecord, TreatmentProfile};
use crate::error::{PseError, Result};
use crate::estimator::{NuisanceFits, Prepared};
use crate::linalg::{least_squares, solve_quadratic, Projector, SolveDiagnostics};
use crate::series::{fit_series_design, SeriesRegressor};
use crate::stats::two_sided_z;

pub const DEFAULT_OMEGA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaFits {
    pub profile: TreatmentProfile,
    /// `ω̂_k` at index `k - 1`; `None` where it is identically one.
    pub omega: Vec<Option<SeriesRegressor>>,
    pub identically_one: Vec<bool>,
    /// `∏_{j<=k} ω̂_j` re-projected onto `ū_k`; index `k - 1`.
    pub products: Vec<SeriesRegressor>,
    pub floor: f64,
    pub floor_events: usize,
    /// `max_i |Ê[moment | ·]|` after plugging `ω̂_k` back; index `k - 1`.
    pub moment_residuals: Vec<f64>,
    /// Re-projected products at the complete cases; index `k - 1`.
    #[serde(skip)]
    pub product_values: Vec<Vec<f64>>,
}

impl OmegaFits {
    /// Floored `ω̂_k` at a point `(x, m̄_{k-1})`.
    pub fn omega_at(&self, k: usize, point: &[f64]) -> Result<f64> {
        match &self.omega[k - 1] {
            None => Ok(1.0),
            Some(reg) => Ok(reg.predict(point)?.max(self.floor)),
        }
    }
}

pub fn fit_omegas(dataset: &Dataset, gamma: &crate::gamma::GammaModel, profile: &TreatmentProfile, specs: &[BasisSpec]) -> Result<OmegaFits> {
    let prep = Prepared::new(dataset, gamma, specs)?;
    fit_omegas_prepared(&prep, profile, DEFAULT_OMEGA_FLOOR)
}

/// Solves the sieve version of the conditional moment restrictions
/// `E[(1+γ){I(A=a_k) ω_k - I(A=a_{k-1})} | R=1, x, m̄_{k-1}] = 0`
/// (with `I(A=a_0) ≡ 1`). `ω_k` enters linearly inside a linear projection, so
/// each stage is a least-squares problem in the coefficients of `ū_k`.
pub fn fit_omegas_prepared(prep: &Prepared, profile: &TreatmentProfile, floor: f64) -> Result<OmegaFits> {
    let k_max = prep.k();
    let nc = prep.rows.len();
    let mut omega = Vec::with_capacity(k_max + 1);
    let mut identically_one = Vec::with_capacity(k_max + 1);
    let mut moment_residuals = Vec::with_capacity(k_max + 1);
    let mut floor_events = 0;
    let mut cumulative = vec![1.0; nc];
    let mut products = Vec::with_capacity(k_max + 1);
    let mut product_values = Vec::with_capacity(k_max + 1);

    for k in 1..=k_max + 1 {
        let level = profile.level(k);
        let design = &prep.designs[k - 1];
        let one = k >= 2 && profile.level(k - 1) == level;
        identically_one.push(one);
        if one {
            omega.push(None);
            moment_residuals.push(0.0);
        } else {
            if !prep.a.contains(&level) {
                return Err(PseError::EmptyArm { stage: k, level });
            }
            let proj = Projector::new(design)?;
            let d: Vec<f64> = prep.arm_weights(level);
            let target = DVector::from_iterator(
                nc,
                (0..nc).map(|o| {
                    let prev = if k == 1 { 1.0 } else { f64::from(prep.a[o] == profile.level(k - 1)) };
                    prep.one_plus_gamma[o] * prev
                }),
            );
            let mut du = design.clone();
            for (o, mut row) in du.row_iter_mut().enumerate() {
                row *= d[o];
            }
            let (theta, diag) = least_squares(&proj.reduce_matrix(&du), &proj.reduce(&target))?;
            let resid = &du * &theta - &target;
            moment_residuals.push(proj.project(&resid).amax());
            let reg = SeriesRegressor {
                spec: prep.specs[k - 1].clone(),
                coef: theta.iter().copied().collect(),
                gram_diag_ridge: diag.ridge,
                fit_diagnostics: diag,
            };
            let vals = reg.predict_design(design);
            for (c, v) in cumulative.iter_mut().zip(&vals) {
                if *v < floor {
                    floor_events += 1;
                }
                *c *= v.max(floor);
            }
            omega.push(Some(reg));
        }
        let prod = fit_series_design(&prep.specs[k - 1], design, &cumulative, None)?;
        product_values.push(prod.predict_design(design));
        products.push(prod);
    }
    Ok(OmegaFits {
        profile: profile.clone(),
        omega,
        identically_one,
        products,
        floor,
        floor_events,
        moment_residuals,
        product_values,
    })
}

/// `φ̂` at one complete-case record.
pub fn compute_phi(record: &ObservedRecord, fits: &NuisanceFits, omegas: &OmegaFits) -> Result<f64> {
    let x = covariate_vector(record)?;
    let k_max = fits.mu.len() - 1;
    let point = |j: usize| -> Vec<f64> { x.iter().copied().chain(record.m[..j].iter().flatten().copied()).collect() };
    let mu: Vec<f64> = (1..=k_max + 1).map(|k| fits.mu[k - 1].predict(&point(k - 1))).collect::<Result<_>>()?;
    let prod: Vec<f64> =
        (1..=k_max + 1).map(|k| omegas.products[k - 1].predict(&point(k - 1))).collect::<Result<_>>()?;
    Ok(phi_from_parts(record.a, record.y, &fits.profile, &mu, &prod))
}

fn phi_from_parts(a: u8, y: f64, profile: &TreatmentProfile, mu: &[f64], prod: &[f64]) -> f64 {
    let k_max = mu.len() - 1;
    let mut phi = mu[0];
    for k in 1..=k_max {
        if a == profile.level(k) {
            phi += prod[k - 1] * (mu[k] - mu[k - 1]);
        }
    }
    if a == profile.level(k_max + 1) {
        phi += prod[k_max] * (y - mu[k_max]);
    }
    phi
}

/// `φ̂_i` for every record; 0 where `r = 0` (it is always multiplied by `R`).
pub fn phi_values(prep: &Prepared, fits: &NuisanceFits, omegas: &OmegaFits) -> Vec<f64> {
    let k_max = prep.k();
    let mut out = vec![0.0; prep.n];
    let mut mu = vec![0.0; k_max + 1];
    let mut prod = vec![0.0; k_max + 1];
    for (o, &i) in prep.rows.iter().enumerate() {
        for k in 0..=k_max {
            mu[k] = fits.mu_values[k][o];
            prod[k] = omegas.product_values[k][o];
        }
        out[i] = phi_from_parts(prep.a[o], prep.y[o], &fits.profile, &mu, &prod);
    }
    out
}

/// The quadratic representer problem over the linear span of `q̄`.
pub struct RepresenterSystem {
    n: usize,
    rows: Vec<usize>,
    /// `q̄` at the complete cases.
    qmat: DMatrix<f64>,
    /// `T' diag(r) Q`, so that `||H(r ∘ q̄'b)||^2 = ||G b||^2`.
    g: DMatrix<f64>,
    proj: Projector,
}

impl RepresenterSystem {
    pub fn new(dataset: &Dataset, spec_q: &BasisSpec, spec_p: &BasisSpec) -> Result<Self> {
        let rows = dataset.complete_indices();
        let qmat = design_matrix(spec_q, &dataset.odds_rows(&rows)?)?;
        let pmat = design_matrix(spec_p, &dataset.shadow_rows())?;
        let proj = Projector::new(&pmat)?;
        let t = proj.t();
        let mut t_c = DMatrix::zeros(t.ncols(), rows.len());
        for (o, &i) in rows.iter().enumerate() {
            for j in 0..t.ncols() {
                t_c[(j, o)] = t[(i, j)];
            }
        }
        let g = t_c * &qmat;
        Ok(RepresenterSystem { n: dataset.n(), rows, qmat, g, proj })
    }

    /// Criterion `(1/2n) Σ [Ê{Rϱ̃|·}]^2 - (1/n) Σ R φ̂ ϱ̃` at coefficients `b`.
    pub fn criterion(&self, b: &DVector<f64>, phi: &[f64]) -> f64 {
        let rho = &self.qmat * b;
        let lin: f64 = self.rows.iter().enumerate().map(|(o, &i)| phi[i] * rho[o]).sum();
        0.5 * (&self.g * b).norm_squared() / self.n as f64 - lin / self.n as f64
    }

    pub fn solve(&self, phi: &[f64]) -> Result<Representer> {
        if phi.len() != self.n {
            return Err(PseError::LengthMismatch(self.n, phi.len()));
        }
        let phi_c = DVector::from_iterator(self.rows.len(), self.rows.iter().map(|&i| phi[i]));
        let c = self.qmat.transpose() * phi_c;
        let (b, diag) = solve_quadratic(&self.g, &c)?;
        let criterion = self.criterion(&b, phi);
        let rho = &self.qmat * &b;
        let mut r_rho = DVector::zeros(self.n);
        for (o, &i) in self.rows.iter().enumerate() {
            r_rho[i] = rho[o];
        }
        let projected = self.proj.project(&r_rho).iter().copied().collect();
        Ok(Representer { coef: b.iter().copied().collect(), criterion, diagnostics: diag, projected })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Representer {
    pub coef: Vec<f64>,
    pub criterion: f64,
    pub diagnostics: SolveDiagnostics,
    /// `Ê{Rϱ̂ | z, x_obs, a, m̄, y}` at every record.
    pub projected: Vec<f64>,
}

pub fn fit_representer(dataset: &Dataset, phi_values: &[f64], spec_q: &BasisSpec, spec_p: &BasisSpec) -> Result<Representer> {
    RepresenterSystem::new(dataset, spec_q, spec_p)?.solve(phi_values)
}

/// Per-unit influence values. `rho_projected` may be `None` when the correction
/// term vanishes identically (`γ̂ ≡ 0` with no missing records).
pub fn influence_values(
    r: &[f64],
    gamma: &[f64],
    phi: &[f64],
    rho_projected: Option<&[f64]>,
    psi_hat: f64,
) -> Result<Vec<f64>> {
    let n = r.len();
    for len in [gamma.len(), phi.len()] {
        if len != n {
            return Err(PseError::LengthMismatch(n, len));
        }
    }
    if let Some(rho) = rho_projected {
        if rho.len() != n {
            return Err(PseError::LengthMismatch(n, rho.len()));
        }
    }
    Ok((0..n)
        .map(|i| {
            let main = r[i] * (1.0 + gamma[i]) * phi[i] - psi_hat;
            let corr = rho_projected.map_or(0.0, |rho| rho[i] * (r[i] * gamma[i] - 1.0 + r[i]));
            main - corr
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InferenceDiagnostics {
    pub mean_if: f64,
    pub representer_criterion: Option<f64>,
    /// Largest weighted normal-equation violation over the `μ̂_k` fits.
    pub mu_orthogonality: f64,
    /// Largest projected moment residual over the `ω̂_k` fits.
    pub omega_moment_residual: f64,
    pub omega_floor_events: usize,
    /// `(1/n) Σ R(1+γ̂)φ̂ - ψ̂`.
    pub self_consistency_gap: f64,
    pub max_ridge: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub psi_hat: f64,
    #[serde(skip)]
    pub if_values: Vec<f64>,
    #[serde(rename = "sigma2")]
    pub sigma2_hat: f64,
    pub n: usize,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub level: f64,
    pub diagnostics: InferenceDiagnostics,
}

impl InferenceReport {
    pub fn se(&self) -> f64 {
        (self.sigma2_hat / self.n as f64).sqrt()
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_lo <= truth && truth <= self.ci_hi
    }

    /// A report from an externally pooled variance (`σ²/n` given directly).
    pub fn from_variance(estimate: f64, var_of_estimate: f64, n: usize, level: f64) -> Self {
        let half = two_sided_z(level) * var_of_estimate.max(0.0).sqrt();
        InferenceReport {
            psi_hat: estimate,
            if_values: Vec::new(),
            sigma2_hat: var_of_estimate * n as f64,
            n,
            ci_lo: estimate - half,
            ci_hi: estimate + half,
            level,
            diagnostics: InferenceDiagnostics::default(),
        }
    }
}

pub fn variance_and_ci(if_values: &[f64], psi_hat: f64, level: f64) -> Result<InferenceReport> {
    let n = if_values.len();
    if n < 2 {
        return Err(PseError::Data(format!("variance needs at least 2 influence values, got {n}")));
    }
    let sigma2 = if_values.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let half = two_sided_z(level) * (sigma2 / n as f64).sqrt();
    Ok(InferenceReport {
        psi_hat,
        if_values: if_values.to_vec(),
        sigma2_hat: sigma2,
        n,
        ci_lo: psi_hat - half,
        ci_hi: psi_hat + half,
        level,
        diagnostics: InferenceDiagnostics {
            mean_if: if_values.iter().sum::<f64>() / n as f64,
            ..Default::default()
        },
    })
}

/// Inference for `ψ̂_A - ψ̂_B` from unit-aligned influence vectors.
pub fn contrast_variance(if_a: &[f64], if_b: &[f64], contrast_hat: f64, level: f64) -> Result<InferenceReport> {
    if if_a.len() != if_b.len() {
        return Err(PseError::LengthMismatch(if_a.len(), if_b.len()));
    }
    let diff: Vec<f64> = if_a.iter().zip(if_b).map(|(a, b)| a - b).collect();
    variance_and_ci(&diff, contrast_hat, level)
}
