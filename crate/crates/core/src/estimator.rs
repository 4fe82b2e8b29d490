//! Weighted iterated regression imputation.
//!
//! For a treatment profile `(a_1, .., a_{K+1})` the chain fits
//! `μ_{K+1}(x, m̄_K)` by regressing `Y` with weights `I(A=a_{K+1}) R (1+γ̂)`, then
//! for `k = K, .., 1` regresses the fitted `μ̂_{k+1}` on `(x, m̄_{k-1})` with weights
//! `I(A=a_k) R (1+γ̂)`. The point estimate is
//! `ψ̂ = (1/n) Σ_i R_i (1 + γ̂_i) μ̂_1(X_i)`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, BasisChoice, BasisSpec};
use crate::data::{Dataset, TreatmentProfile};
use crate::error::{PseError, Result};
use crate::gamma::GammaModel;
use crate::series::{fit_series_design, orthogonality_from_design, SeriesRegressor};

/// Fits the `K + 1` regression bases `ū_k` over `(x, m̄_{k-1})` on the complete cases.
pub fn build_mu_specs(dataset: &Dataset, choice: &BasisChoice) -> Result<Vec<BasisSpec>> {
    let rows = dataset.complete_indices();
    if rows.is_empty() {
        return Err(PseError::EmptyResult);
    }
    (1..=dataset.k() + 1)
        .map(|k| BasisSpec::fit(choice, &dataset.covariate_mediator_rows(&rows, k - 1)?))
        .collect()
}

/// Everything about a dataset that the per-profile fits share: complete-case
/// rows, the regression designs and the fitted odds.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub n: usize,
    pub rows: Vec<usize>,
    /// Treatment of each complete case.
    pub a: Vec<u8>,
    pub y: Vec<f64>,
    /// `γ̂` for every record (0 where `r = 0`).
    pub gamma: Vec<f64>,
    /// `1 + γ̂` on the complete cases.
    pub one_plus_gamma: Vec<f64>,
    /// Design of `ū_k` at the complete cases; index `k - 1`.
    pub designs: Vec<DMatrix<f64>>,
    pub specs: Vec<BasisSpec>,
}

impl Prepared {
    pub fn new(dataset: &Dataset, gamma: &GammaModel, mu_specs: &[BasisSpec]) -> Result<Self> {
        let k = dataset.k();
        if mu_specs.len() != k + 1 {
            return Err(PseError::Config(format!("need {} regression bases, got {}", k + 1, mu_specs.len())));
        }
        let rows = dataset.complete_indices();
        if rows.is_empty() {
            return Err(PseError::EmptyResult);
        }
        let gamma_all = gamma.eval_records(dataset)?;
        let designs = mu_specs
            .iter()
            .enumerate()
            .map(|(j, spec)| design_matrix(spec, &dataset.covariate_mediator_rows(&rows, j)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            n: dataset.n(),
            a: rows.iter().map(|&i| dataset.records[i].a).collect(),
            y: rows.iter().map(|&i| dataset.records[i].y).collect(),
            one_plus_gamma: rows.iter().map(|&i| 1.0 + gamma_all[i]).collect(),
            gamma: gamma_all,
            rows,
            designs,
            specs: mu_specs.to_vec(),
        })
    }

    pub fn k(&self) -> usize {
        self.designs.len() - 1
    }

    /// `I(A = level) (1 + γ̂)` on the complete cases.
    pub fn arm_weights(&self, level: u8) -> Vec<f64> {
        self.a.iter().zip(&self.one_plus_gamma).map(|(&a, &g)| if a == level { g } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFits {
    pub profile: TreatmentProfile,
    pub gamma: GammaModel,
    /// `μ̂_k` at index `k - 1`.
    pub mu: Vec<SeriesRegressor>,
    pub mu_specs: Vec<BasisSpec>,
    /// `μ̂_k` evaluated at the complete cases; index `k - 1`.
    #[serde(skip)]
    pub mu_values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiEstimate {
    pub profile: TreatmentProfile,
    pub psi_hat: f64,
    /// `R_i (1 + γ̂_i) μ̂_1(X_i)` for every record.
    pub per_unit_plugin: Vec<f64>,
}

pub fn fit_mu_chain(
    dataset: &Dataset,
    gamma: &GammaModel,
    profile: &TreatmentProfile,
    mu_specs: &[BasisSpec],
) -> Result<NuisanceFits> {
    let prep = Prepared::new(dataset, gamma, mu_specs)?;
    fit_mu_chain_prepared(&prep, gamma, profile)
}

pub fn fit_mu_chain_prepared(prep: &Prepared, gamma: &GammaModel, profile: &TreatmentProfile) -> Result<NuisanceFits> {
    let k_max = prep.k();
    if profile.k() != k_max {
        return Err(PseError::Config(format!("profile {profile} does not match K = {k_max}")));
    }
    let mut mu: Vec<Option<SeriesRegressor>> = vec![None; k_max + 1];
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); k_max + 1];
    let mut response = prep.y.clone();
    for k in (1..=k_max + 1).rev() {
        let level = profile.level(k);
        let w = prep.arm_weights(level);
        if w.iter().all(|&v| v == 0.0) {
            return Err(PseError::EmptyArm { stage: k, level });
        }
        let reg = fit_series_design(&prep.specs[k - 1], &prep.designs[k - 1], &response, Some(&w))?;
        let fitted = reg.predict_design(&prep.designs[k - 1]);
        response = fitted.clone();
        values[k - 1] = fitted;
        mu[k - 1] = Some(reg);
    }
    Ok(NuisanceFits {
        profile: profile.clone(),
        gamma: gamma.clone(),
        mu: mu.into_iter().map(|m| m.expect("every stage fitted")).collect(),
        mu_specs: prep.specs.clone(),
        mu_values: values,
    })
}

/// Largest weighted normal-equation violation of each `μ̂_k`, index `k - 1`.
pub fn mu_orthogonality(prep: &Prepared, fits: &NuisanceFits) -> Vec<f64> {
    let k_max = prep.k();
    let scale = prep.rows.len() as f64 / prep.n as f64;
    (1..=k_max + 1)
        .map(|k| {
            let target = if k == k_max + 1 { &prep.y } else { &fits.mu_values[k] };
            let w = prep.arm_weights(fits.profile.level(k));
            orthogonality_from_design(&fits.mu[k - 1], &prep.designs[k - 1], target, Some(&w)) * scale
        })
        .collect()
}

pub fn estimate_psi(dataset: &Dataset, fits: &NuisanceFits) -> Result<PsiEstimate> {
    let prep = Prepared::new(dataset, &fits.gamma, &fits.mu_specs)?;
    let mu1 = fits.mu[0].predict_design(&prep.designs[0]);
    Ok(psi_from_values(&prep, &fits.profile, &mu1))
}

pub(crate) fn psi_from_values(prep: &Prepared, profile: &TreatmentProfile, mu1: &[f64]) -> PsiEstimate {
    let mut per_unit = vec![0.0; prep.n];
    for (o, &i) in prep.rows.iter().enumerate() {
        per_unit[i] = prep.one_plus_gamma[o] * mu1[o];
    }
    let psi_hat = per_unit.iter().sum::<f64>() / prep.n as f64;
    PsiEstimate { profile: profile.clone(), psi_hat, per_unit_plugin: per_unit }
}

/// Named path-specific contrasts `ψ(A) - ψ(B)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    /// `ψ(a_{K+1}=1, ā_K=0) - ψ(0, .., 0)`.
    Nde,
    /// Indirect effect through mediator `k` (1-based) and its descendants.
    Nie(usize),
    Te,
    /// Effect along `A -> M_k -> Y` only: `ψ(1, .., 1) - ψ(1, .., a_k = 0, .., 1)`.
    PathThrough(usize),
    /// A single counterfactual mean, `ψ(profile)`.
    Psi(TreatmentProfile),
    Contrast(TreatmentProfile, TreatmentProfile),
}

impl Estimand {
    /// The `(A, B)` profile pair of the contrast; `B` is `None` for `Psi`.
    pub fn profiles(&self, k: usize) -> Result<(TreatmentProfile, Option<TreatmentProfile>)> {
        let ones = TreatmentProfile::constant(1, k);
        let zeros = TreatmentProfile::constant(0, k);
        let with = |f: &dyn Fn(usize) -> u8| TreatmentProfile::new((1..=k + 1).map(f).collect(), k);
        let check = |j: usize| {
            if j == 0 || j > k {
                Err(PseError::Config(format!("mediator index {j} outside 1..={k}")))
            } else {
                Ok(())
            }
        };
        Ok(match self {
            Estimand::Nde => (with(&|i| u8::from(i == k + 1))?, Some(zeros)),
            Estimand::Nie(j) => {
                check(*j)?;
                let j = *j;
                (with(&|i| u8::from(i >= j))?, Some(with(&|i| u8::from(i > j))?))
            }
            Estimand::Te => (ones, Some(zeros)),
            Estimand::PathThrough(j) => {
                check(*j)?;
                let j = *j;
                (ones, Some(with(&|i| u8::from(i != j))?))
            }
            Estimand::Psi(p) => (TreatmentProfile::new(p.levels().to_vec(), k)?, None),
            Estimand::Contrast(a, b) => {
                (TreatmentProfile::new(a.levels().to_vec(), k)?, Some(TreatmentProfile::new(b.levels().to_vec(), k)?))
            }
        })
    }

    /// NDE, NIE_1..NIE_K, TE.
    pub fn decomposition(k: usize) -> Vec<Estimand> {
        let mut v = vec![Estimand::Nde];
        v.extend((1..=k).map(Estimand::Nie));
        v.push(Estimand::Te);
        v
    }

    pub fn parse(s: &str, k: usize) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let index = |prefix: &str| -> Option<usize> { t.strip_prefix(prefix).and_then(|r| r.parse().ok()) };
        if t == "nde" {
            Ok(Estimand::Nde)
        } else if t == "te" {
            Ok(Estimand::Te)
        } else if let Some(j) = index("nie_").or_else(|| index("nie")) {
            Ok(Estimand::Nie(j))
        } else if let Some(j) = index("pse_m") {
            Ok(Estimand::PathThrough(j))
        } else if let Some(p) = t.strip_prefix("psi") {
            Ok(Estimand::Psi(TreatmentProfile::parse(p, k)?))
        } else {
            Err(PseError::Config(format!("unknown estimand '{s}' (expected nde, nie_k, te, pse_mk, psi(…))")))
        }
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimand::Nde => write!(f, "NDE"),
            Estimand::Nie(k) => write!(f, "NIE{k}"),
            Estimand::Te => write!(f, "TE"),
            Estimand::PathThrough(k) => write!(f, "PSE_M{k}"),
            Estimand::Psi(p) => write!(f, "psi{p}"),
            Estimand::Contrast(a, b) => write!(f, "psi{a}-psi{b}"),
        }
    }
}

/// `ψ̂` per profile, fitted once and reused so that contrasts sharing a profile
/// see the identical value.
#[derive(Debug, Clone, Default)]
pub struct PsiCache {
    entries: BTreeMap<TreatmentProfile, (NuisanceFits, PsiEstimate)>,
}

impl PsiCache {
    pub fn get_or_fit(
        &mut self,
        prep: &Prepared,
        gamma: &GammaModel,
        profile: &TreatmentProfile,
    ) -> Result<&(NuisanceFits, PsiEstimate)> {
        if !self.entries.contains_key(profile) {
            let fits = fit_mu_chain_prepared(prep, gamma, profile)?;
            let est = psi_from_values(prep, profile, &fits.mu_values[0]);
            self.entries.insert(profile.clone(), (fits, est));
        }
        Ok(&self.entries[profile])
    }

    pub fn psi(&self, profile: &TreatmentProfile) -> Option<f64> {
        self.entries.get(profile).map(|(_, e)| e.psi_hat)
    }
}

/// `ψ̂(A) - ψ̂(B)` with `γ̂` shared between the two profiles.
pub fn estimate_contrast(
    dataset: &Dataset,
    gamma: &GammaModel,
    profiles: (&TreatmentProfile, &TreatmentProfile),
    mu_specs: &[BasisSpec],
) -> Result<(f64, (PsiEstimate, PsiEstimate))> {
    let prep = Prepared::new(dataset, gamma, mu_specs)?;
    let mut cache = PsiCache::default();
    let a = cache.get_or_fit(&prep, gamma, profiles.0)?.1.clone();
    let b = cache.get_or_fit(&prep, gamma, profiles.1)?.1.clone();
    Ok((a.psi_hat - b.psi_hat, (a, b)))
}
