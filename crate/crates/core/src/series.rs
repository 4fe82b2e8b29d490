//! Series (sieve) regression: weighted least squares on a polynomial basis.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, BasisSpec};
use crate::error::{PseError, Result};
use crate::linalg::{weighted_least_squares, SolveDiagnostics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRegressor {
    pub spec: BasisSpec,
    pub coef: Vec<f64>,
    /// Relative ridge used in the solve (0 for an exact projection).
    pub gram_diag_ridge: f64,
    pub fit_diagnostics: SolveDiagnostics,
}

impl SeriesRegressor {
    /// A regressor with the given coefficients and no fit history.
    pub fn from_coef(spec: BasisSpec, coef: Vec<f64>) -> Result<Self> {
        if coef.len() != spec.dim() {
            return Err(PseError::DimensionMismatch(format!(
                "coefficient vector has {} entries, basis has {}",
                coef.len(),
                spec.dim()
            )));
        }
        Ok(SeriesRegressor { spec, coef, gram_diag_ridge: 0.0, fit_diagnostics: SolveDiagnostics::default() })
    }

    pub fn predict(&self, point: &[f64]) -> Result<f64> {
        let b = self.spec.eval(point)?;
        Ok(b.iter().zip(&self.coef).map(|(x, c)| x * c).sum())
    }

    pub fn predict_rows(&self, inputs: &DMatrix<f64>) -> Result<Vec<f64>> {
        let b = design_matrix(&self.spec, inputs)?;
        Ok((b * DVector::from_column_slice(&self.coef)).iter().copied().collect())
    }

    pub fn predict_design(&self, design: &DMatrix<f64>) -> Vec<f64> {
        (design * DVector::from_column_slice(&self.coef)).iter().copied().collect()
    }
}

pub fn predict(reg: &SeriesRegressor, point: &[f64]) -> Result<f64> {
    reg.predict(point)
}

/// Fits `responses` on the basis of `inputs`, minimizing
/// `Σ w_i (V_i - b(x_i)'c)^2`.
pub fn fit_series(
    spec: &BasisSpec,
    inputs: &DMatrix<f64>,
    responses: &[f64],
    weights: Option<&[f64]>,
) -> Result<SeriesRegressor> {
    if inputs.nrows() != responses.len() {
        return Err(PseError::LengthMismatch(inputs.nrows(), responses.len()));
    }
    if responses.iter().any(|v| !v.is_finite()) {
        return Err(PseError::NonFiniteInput("series responses".into()));
    }
    let design = design_matrix(spec, inputs)?;
    fit_series_design(spec, &design, responses, weights)
}

/// As [`fit_series`], for a design matrix that has already been evaluated.
pub fn fit_series_design(
    spec: &BasisSpec,
    design: &DMatrix<f64>,
    responses: &[f64],
    weights: Option<&[f64]>,
) -> Result<SeriesRegressor> {
    let (coef, diag) = weighted_least_squares(design, responses, weights)?;
    Ok(SeriesRegressor {
        spec: spec.clone(),
        coef: coef.iter().copied().collect(),
        gram_diag_ridge: diag.ridge,
        fit_diagnostics: diag,
    })
}

/// `max_j |Σ_i w_i (V_i - fitted_i) B_ij| / n`: the largest violation of the
/// weighted normal equations.
pub fn project_residual_orthogonality(
    reg: &SeriesRegressor,
    inputs: &DMatrix<f64>,
    responses: &[f64],
    weights: Option<&[f64]>,
) -> Result<f64> {
    let design = design_matrix(&reg.spec, inputs)?;
    Ok(orthogonality_from_design(reg, &design, responses, weights))
}

pub fn orthogonality_from_design(
    reg: &SeriesRegressor,
    design: &DMatrix<f64>,
    responses: &[f64],
    weights: Option<&[f64]>,
) -> f64 {
    let n = design.nrows();
    let fitted = reg.predict_design(design);
    let resid: DVector<f64> = DVector::from_iterator(
        n,
        (0..n).map(|i| weights.map_or(1.0, |w| w[i]) * (responses[i] - fitted[i])),
    );
    let moments = design.transpose() * resid;
    moments.amax() / n as f64
}
