//! End-to-end estimation on one dataset: odds fit, regression chains, weights,
//! representer and influence-function inference for a list of estimands.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::basis::{BasisChoice, BasisSpec};
use crate::data::{Dataset, TreatmentProfile};
use crate::error::{PseError, Result};
use crate::estimator::{build_mu_specs, mu_orthogonality, Estimand, NuisanceFits, Prepared, PsiCache};
use crate::gamma::{fit_gamma, fit_gamma_specs, GammaFitReport, GammaModel, GammaOptions};
use crate::inference::{
    contrast_variance, fit_omegas_prepared, influence_values, phi_values, variance_and_ci, InferenceReport,
    OmegaFits, RepresenterSystem, DEFAULT_OMEGA_FLOOR,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisConfig {
    /// `q̄` over `(x, a, m̄, y)`.
    pub odds: BasisChoice,
    /// `p̄` over `(z, x_obs, a, m̄, y)`.
    pub projection: BasisChoice,
    /// `ū_k` over `(x, m̄_{k-1})`.
    pub regression: BasisChoice,
}

/// Degree-3 polynomials throughout. The odds sieve is additive within each
/// treatment arm; the projection basis adds pairwise products within each arm,
/// so `l_n > s_n`; the regression bases are additive.
impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            odds: BasisChoice::additive_by_treatment(3),
            projection: BasisChoice { by_treatment: true, ..BasisChoice::power(3) },
            regression: BasisChoice::additive(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub basis: BasisConfig,
    pub gamma: GammaOptions,
    pub level: f64,
    pub omega_floor: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            basis: BasisConfig::default(),
            gamma: GammaOptions::default(),
            level: 0.95,
            omega_floor: DEFAULT_OMEGA_FLOOR,
        }
    }
}

impl PipelineConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(PseError::Config(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if !(self.omega_floor > 0.0) {
            return Err(PseError::Config(format!("omega_floor must be positive, got {}", self.omega_floor)));
        }
        if self.gamma.max_iter == 0 || self.gamma.restarts == 0 {
            return Err(PseError::Config("gamma solver needs max_iter >= 1 and restarts >= 1".into()));
        }
        Ok(())
    }
}

/// The fitted odds model with the bases it was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaStage {
    pub model: GammaModel,
    pub report: GammaFitReport,
    pub spec_q: Option<BasisSpec>,
    pub spec_p: Option<BasisSpec>,
}

impl GammaStage {
    /// `γ ≡ 0`, used by the oracle and complete-case analyses.
    pub fn zero() -> Self {
        GammaStage { model: GammaModel::zero(), report: GammaFitReport::trivial(), spec_q: None, spec_p: None }
    }
}

pub fn fit_gamma_stage(dataset: &Dataset, cfg: &PipelineConfig) -> Result<GammaStage> {
    if dataset.n_complete() == dataset.n() {
        return Ok(GammaStage::zero());
    }
    let (spec_q, spec_p) = fit_gamma_specs(dataset, &cfg.basis.odds, &cfg.basis.projection)?;
    let (model, report) = fit_gamma(dataset, &spec_q, &spec_p, &cfg.gamma)?;
    Ok(GammaStage { model, report, spec_q: Some(spec_q), spec_p: Some(spec_p) })
}

/// Inference for one counterfactual mean `ψ(ā)`.
#[derive(Debug, Clone)]
pub struct ProfileInference {
    pub fits: NuisanceFits,
    pub omegas: OmegaFits,
    pub phi: Vec<f64>,
    pub report: InferenceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandReport {
    pub estimand: Estimand,
    pub name: String,
    pub profile_a: TreatmentProfile,
    pub profile_b: Option<TreatmentProfile>,
    pub psi_a: f64,
    pub psi_b: Option<f64>,
    pub report: InferenceReport,
}

impl EstimandReport {
    pub fn estimate(&self) -> f64 {
        self.report.psi_hat
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub n: usize,
    pub n_complete: usize,
    pub gamma: GammaFitReport,
    pub gamma_is_zero: bool,
    /// `ψ̂(ā)` inference keyed by the profile's display form.
    pub psi: BTreeMap<String, InferenceReport>,
    pub estimands: Vec<EstimandReport>,
}

impl Analysis {
    pub fn get(&self, estimand: &Estimand) -> Option<&EstimandReport> {
        self.estimands.iter().find(|e| &e.estimand == estimand)
    }
}

/// Shared state for per-profile inference on one dataset.
pub struct Engine<'a> {
    dataset: &'a Dataset,
    gamma: &'a GammaModel,
    prep: Prepared,
    cache: PsiCache,
    representer: Option<RepresenterSystem>,
    cfg: &'a PipelineConfig,
    profiles: BTreeMap<TreatmentProfile, ProfileInference>,
}

impl<'a> Engine<'a> {
    pub fn new(dataset: &'a Dataset, stage: &'a GammaStage, cfg: &'a PipelineConfig) -> Result<Self> {
        cfg.check()?;
        let mu_specs = build_mu_specs(dataset, &cfg.basis.regression)?;
        let prep = Prepared::new(dataset, &stage.model, &mu_specs)?;
        // The correction term vanishes only when nothing is missing and γ̂ ≡ 0.
        let needs_representer = !(stage.model.is_zero && dataset.n_complete() == dataset.n());
        let representer = if needs_representer {
            let (q, p) = match (&stage.spec_q, &stage.spec_p) {
                (Some(q), Some(p)) => (q.clone(), p.clone()),
                _ => fit_gamma_specs(dataset, &cfg.basis.odds, &cfg.basis.projection)?,
            };
            Some(RepresenterSystem::new(dataset, &q, &p)?)
        } else {
            None
        };
        Ok(Engine {
            dataset,
            gamma: &stage.model,
            prep,
            cache: PsiCache::default(),
            representer,
            cfg,
            profiles: BTreeMap::new(),
        })
    }

    pub fn prepared(&self) -> &Prepared {
        &self.prep
    }

    pub fn profile(&mut self, profile: &TreatmentProfile) -> Result<&ProfileInference> {
        if !self.profiles.contains_key(profile) {
            let inf = self.compute(profile)?;
            self.profiles.insert(profile.clone(), inf);
        }
        Ok(&self.profiles[profile])
    }

    fn compute(&mut self, profile: &TreatmentProfile) -> Result<ProfileInference> {
        let (fits, est) = self.cache.get_or_fit(&self.prep, self.gamma, profile)?.clone();
        let omegas = fit_omegas_prepared(&self.prep, profile, self.cfg.omega_floor)?;
        let phi = phi_values(&self.prep, &fits, &omegas);
        let rep = match &self.representer {
            Some(sys) => Some(sys.solve(&phi)?),
            None => None,
        };
        let r = self.dataset.r();
        let ifs = influence_values(&r, &self.prep.gamma, &phi, rep.as_ref().map(|x| x.projected.as_slice()), est.psi_hat)?;
        let mut report = variance_and_ci(&ifs, est.psi_hat, self.cfg.level)?;

        let n = self.prep.n as f64;
        let weighted_phi: f64 = self
            .prep
            .rows
            .iter()
            .enumerate()
            .map(|(o, &i)| self.prep.one_plus_gamma[o] * phi[i])
            .sum::<f64>()
            / n;
        let mu_orth = mu_orthogonality(&self.prep, &fits);
        let d = &mut report.diagnostics;
        d.representer_criterion = rep.as_ref().map(|x| x.criterion);
        d.mu_orthogonality = mu_orth.iter().copied().fold(0.0, f64::max);
        d.omega_moment_residual = omegas.moment_residuals.iter().copied().fold(0.0, f64::max);
        d.omega_floor_events = omegas.floor_events;
        d.self_consistency_gap = weighted_phi - est.psi_hat;
        let ridges = fits
            .mu
            .iter()
            .map(|m| m.gram_diag_ridge)
            .chain(omegas.omega.iter().flatten().map(|m| m.gram_diag_ridge))
            .chain(rep.iter().map(|x| x.diagnostics.ridge));
        d.max_ridge = ridges.fold(0.0, f64::max);
        if omegas.floor_events > 0 {
            d.notes.push(format!("{} weight evaluations floored at {}", omegas.floor_events, omegas.floor));
        }
        Ok(ProfileInference { fits, omegas, phi, report })
    }

    pub fn estimand(&mut self, estimand: &Estimand) -> Result<EstimandReport> {
        let k = self.dataset.k();
        let (a, b) = estimand.profiles(k)?;
        let pa = self.profile(&a)?.report.clone();
        let (report, psi_b) = match &b {
            None => (pa.clone(), None),
            Some(b) => {
                let pb = self.profile(b)?.report.clone();
                let mut rep = contrast_variance(&pa.if_values, &pb.if_values, pa.psi_hat - pb.psi_hat, self.cfg.level)?;
                rep.diagnostics = merge_diagnostics(&pa, &pb, rep.diagnostics.mean_if);
                (rep, Some(pb.psi_hat))
            }
        };
        Ok(EstimandReport {
            estimand: estimand.clone(),
            name: estimand.to_string(),
            profile_a: a,
            profile_b: b,
            psi_a: pa.psi_hat,
            psi_b,
            report,
        })
    }

    pub fn psi_reports(&self) -> BTreeMap<String, InferenceReport> {
        self.profiles.iter().map(|(p, inf)| (p.to_string(), inf.report.clone())).collect()
    }
}

fn merge_diagnostics(a: &InferenceReport, b: &InferenceReport, mean_if: f64) -> crate::inference::InferenceDiagnostics {
    let (x, y) = (&a.diagnostics, &b.diagnostics);
    let rc = match (x.representer_criterion, y.representer_criterion) {
        (Some(u), Some(v)) => Some(u.max(v)),
        (u, v) => u.or(v),
    };
    crate::inference::InferenceDiagnostics {
        mean_if,
        representer_criterion: rc,
        mu_orthogonality: x.mu_orthogonality.max(y.mu_orthogonality),
        omega_moment_residual: x.omega_moment_residual.max(y.omega_moment_residual),
        omega_floor_events: x.omega_floor_events + y.omega_floor_events,
        self_consistency_gap: x.self_consistency_gap - y.self_consistency_gap,
        max_ridge: x.max_ridge.max(y.max_ridge),
        notes: x.notes.iter().chain(&y.notes).cloned().collect(),
    }
}

/// Runs every estimand on `dataset` with the given odds fit.
pub fn analyze_with(
    dataset: &Dataset,
    stage: &GammaStage,
    cfg: &PipelineConfig,
    estimands: &[Estimand],
) -> Result<Analysis> {
    let mut engine = Engine::new(dataset, stage, cfg)?;
    let reports = estimands.iter().map(|e| engine.estimand(e)).collect::<Result<Vec<_>>>()?;
    Ok(Analysis {
        n: dataset.n(),
        n_complete: dataset.n_complete(),
        gamma: stage.report.clone(),
        gamma_is_zero: stage.model.is_zero,
        psi: engine.psi_reports(),
        estimands: reports,
    })
}

/// The shadow-variable estimator: fits `γ̂` and then runs [`analyze_with`].
pub fn analyze(dataset: &Dataset, cfg: &PipelineConfig, estimands: &[Estimand]) -> Result<Analysis> {
    cfg.check()?;
    let stage = fit_gamma_stage(dataset, cfg)?;
    analyze_with(dataset, &stage, cfg, estimands)
}
