//! Comparison estimators: the oracle on the true covariates, complete-case
//! analysis and multiple imputation, all sharing the `γ ≡ 0` engine.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{complete_cases, Dataset, ObservedRecord};
use crate::error::{PseError, Result};
use crate::estimator::Estimand;
use crate::inference::InferenceReport;
use crate::linalg::least_squares;
use crate::pipeline::{analyze, analyze_with, Analysis, EstimandReport, GammaStage, PipelineConfig};

pub const DEFAULT_MI_M: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The shadow-variable estimator.
    Sri,
    Oracle,
    Cca,
    Mi { m: usize },
}

impl Method {
    pub fn check(&self) -> Result<()> {
        match self {
            Method::Mi { m } if *m < 2 => Err(PseError::Config(format!("multiple imputation needs m >= 2, got {m}"))),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Method::Sri => "SRI",
            Method::Oracle => "Oracle",
            Method::Cca => "CCA",
            Method::Mi { .. } => "MI",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = PseError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sri" => Ok(Method::Sri),
            "oracle" => Ok(Method::Oracle),
            "cca" => Ok(Method::Cca),
            "mi" => Ok(Method::Mi { m: DEFAULT_MI_M }),
            other => Err(PseError::Config(format!("unknown method '{other}' (expected sri, oracle, cca, mi)"))),
        }
    }
}

/// The fully observed version of a dataset that still carries its true
/// covariates on every record.
pub fn oracle_dataset(full: &Dataset) -> Result<Dataset> {
    let records = full
        .records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            if rec.x_miss.is_none() && full.dims().x_miss > 0 {
                return Err(PseError::MissingTrueX(i));
            }
            Ok(ObservedRecord { r: 1, ..rec.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(records, full.descriptor.clone())
}

pub fn oracle_estimate(full: &Dataset, cfg: &PipelineConfig, estimands: &[Estimand]) -> Result<Analysis> {
    analyze_with(&oracle_dataset(full)?, &GammaStage::zero(), cfg, estimands)
}

pub fn cca_estimate(dataset: &Dataset, cfg: &PipelineConfig, estimands: &[Estimand]) -> Result<Analysis> {
    let cc = complete_cases(dataset)?;
    analyze_with(&cc, &GammaStage::zero(), cfg, estimands)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationModel {
    /// One coefficient vector per missing coordinate, over
    /// `(1, z, x_obs, a, m̄, y)`.
    pub coef: Vec<Vec<f64>>,
    pub resid_sd: Vec<f64>,
}

fn imputation_row(rec: &ObservedRecord) -> Vec<f64> {
    let mut v = Vec::with_capacity(4 + rec.z.len() + rec.x_obs.len());
    v.push(1.0);
    v.extend(&rec.z);
    v.extend(&rec.x_obs);
    v.push(f64::from(rec.a));
    v.extend(rec.m.iter().flatten());
    v.push(rec.y);
    v
}

/// Linear-Gaussian regression of each missing coordinate on every always
/// observed variable, fitted on the complete cases.
pub fn fit_imputation(dataset: &Dataset) -> Result<ImputationModel> {
    let rows = dataset.complete_indices();
    let dx = dataset.dims().x_miss;
    let first = dataset.records.first().ok_or(PseError::EmptyDataset)?;
    let p = imputation_row(first).len();
    if rows.len() < p + 2 {
        return Err(PseError::InsufficientCompleteCases { needed: p + 2, found: rows.len() });
    }
    let design = DMatrix::from_fn(rows.len(), p, |o, j| imputation_row(&dataset.records[rows[o]])[j]);
    let mut coef = Vec::with_capacity(dx);
    let mut resid_sd = Vec::with_capacity(dx);
    for c in 0..dx {
        let target = DVector::from_iterator(
            rows.len(),
            rows.iter().map(|&i| dataset.records[i].x_miss.as_ref().expect("complete case")[c]),
        );
        let (beta, _) = least_squares(&design, &target)?;
        let rss = (&design * &beta - &target).norm_squared();
        coef.push(beta.iter().copied().collect());
        resid_sd.push((rss / (rows.len() - p) as f64).sqrt());
    }
    Ok(ImputationModel { coef, resid_sd })
}

/// One completed dataset; `stream` selects an independent substream of `seed`.
pub fn impute(dataset: &Dataset, model: &ImputationModel, seed: u64, stream: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let records = dataset
        .records
        .iter()
        .map(|rec| {
            if rec.r == 1 {
                return rec.clone();
            }
            let row = imputation_row(rec);
            let x: Vec<f64> = model
                .coef
                .iter()
                .zip(&model.resid_sd)
                .map(|(beta, sd)| {
                    let mean: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
                    let e: f64 = StandardNormal.sample(&mut rng);
                    mean + sd * e
                })
                .collect();
            ObservedRecord { r: 1, x_miss: Some(x), ..rec.clone() }
        })
        .collect();
    Dataset::new(records, dataset.descriptor.clone())
}

/// Rubin's rules: point = mean, variance = `W̄ + (1 + 1/m) B`.
pub fn rubin_pool(estimates: &[f64], variances: &[f64]) -> Result<(f64, f64, f64)> {
    let m = estimates.len();
    if m != variances.len() {
        return Err(PseError::LengthMismatch(m, variances.len()));
    }
    if m < 2 {
        return Err(PseError::Config(format!("pooling needs at least 2 imputations, got {m}")));
    }
    let mf = m as f64;
    let point = estimates.iter().sum::<f64>() / mf;
    let w = variances.iter().sum::<f64>() / mf;
    let b = estimates.iter().map(|e| (e - point).powi(2)).sum::<f64>() / (mf - 1.0);
    Ok((point, w + (1.0 + 1.0 / mf) * b, b))
}

pub fn mi_estimate_with(
    dataset: &Dataset,
    model: &ImputationModel,
    cfg: &PipelineConfig,
    estimands: &[Estimand],
    m: usize,
    seed: u64,
) -> Result<Analysis> {
    Method::Mi { m }.check()?;
    let runs = (0..m)
        .into_par_iter()
        .map(|j| {
            let completed = impute(dataset, model, seed, j as u64)?;
            analyze_with(&completed, &GammaStage::zero(), cfg, estimands)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = dataset.n();
    let pooled = |pick: &dyn Fn(&Analysis) -> &InferenceReport| -> Result<InferenceReport> {
        let est: Vec<f64> = runs.iter().map(|a| pick(a).psi_hat).collect();
        let var: Vec<f64> = runs.iter().map(|a| pick(a).se().powi(2)).collect();
        let (point, total, between) = rubin_pool(&est, &var)?;
        let mut rep = InferenceReport::from_variance(point, total, n, cfg.level);
        rep.diagnostics.notes.push(format!("pooled over {m} imputations; between-imputation variance {between:e}"));
        Ok(rep)
    };
    let mut out_est = Vec::with_capacity(estimands.len());
    for (idx, first) in runs[0].estimands.iter().enumerate() {
        let report = pooled(&|a: &Analysis| &a.estimands[idx].report)?;
        let mean_of = |f: &dyn Fn(&EstimandReport) -> f64| runs.iter().map(|a| f(&a.estimands[idx])).sum::<f64>() / m as f64;
        out_est.push(EstimandReport {
            psi_a: mean_of(&|e| e.psi_a),
            psi_b: first.psi_b.map(|_| mean_of(&|e| e.psi_b.unwrap_or(0.0))),
            report,
            ..first.clone()
        });
    }
    let mut psi = std::collections::BTreeMap::new();
    for key in runs[0].psi.keys() {
        psi.insert(key.clone(), pooled(&|a: &Analysis| &a.psi[key])?);
    }
    Ok(Analysis {
        n,
        n_complete: dataset.n_complete(),
        gamma: runs[0].gamma.clone(),
        gamma_is_zero: true,
        psi,
        estimands: out_est,
    })
}

pub fn mi_estimate(dataset: &Dataset, cfg: &PipelineConfig, estimands: &[Estimand], m: usize, seed: u64) -> Result<Analysis> {
    let model = fit_imputation(dataset)?;
    mi_estimate_with(dataset, &model, cfg, estimands, m, seed)
}

/// Dispatches on `method`. `full` must carry the true covariates for the oracle.
pub fn run_method(
    method: Method,
    observed: &Dataset,
    full: Option<&Dataset>,
    cfg: &PipelineConfig,
    estimands: &[Estimand],
    seed: u64,
) -> Result<Analysis> {
    method.check()?;
    match method {
        Method::Sri => analyze(observed, cfg, estimands),
        Method::Oracle => oracle_estimate(full.unwrap_or(observed), cfg, estimands),
        Method::Cca => cca_estimate(observed, cfg, estimands),
        Method::Mi { m } => mi_estimate(observed, cfg, estimands, m, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rubin_degenerate() {
        let (p, t, b) = rubin_pool(&[1.5, 1.5, 1.5], &[0.2, 0.2, 0.2]).unwrap();
        assert_eq!((p, b), (1.5, 0.0));
        assert!((t - 0.2).abs() < 1e-15);
    }

    #[test]
    fn rubin_between_component() {
        // mean 2, B = 2, W = 0.5, total = 0.5 + 1.5 * 2
        let (p, t, b) = rubin_pool(&[1.0, 3.0], &[0.5, 0.5]).unwrap();
        assert_eq!(p, 2.0);
        assert_eq!(b, 2.0);
        assert!((t - (0.5 + 1.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("SRI".parse::<Method>().unwrap(), Method::Sri);
        assert_eq!("mi".parse::<Method>().unwrap(), Method::Mi { m: 20 });
        assert!("ipw".parse::<Method>().is_err());
        assert!(Method::Mi { m: 1 }.check().is_err());
    }
}
