//! Polynomial sieve bases.
//!
//! Two kinds ship: `power` (intercept, per-coordinate monomials up to `degree`,
//! then pairwise products of the first powers) and `tensor_power` (full tensor
//! product of per-coordinate monomials). Inputs are standardized coordinate-wise
//! before the monomials are formed. Coordinates flagged binary never go above the
//! first power, since higher powers of a 0/1 variable duplicate it.
//!
//! Either kind can be stratified by a binary coordinate `a`: the basis over the
//! remaining coordinates `b(w)` becomes `(b(w), a b(w))`, which gives every
//! term its own coefficient in each treatment arm.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{PseError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Power,
    TensorPower,
}

/// The serializable part of a basis: what the run config specifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisChoice {
    pub kind: BasisKind,
    pub degree: u32,
    #[serde(default = "yes")]
    pub include_interactions: bool,
    /// Interact every term with the treatment indicator when the conditioning
    /// set contains it.
    #[serde(default)]
    pub by_treatment: bool,
}

fn yes() -> bool {
    true
}

impl Default for BasisChoice {
    fn default() -> Self {
        BasisChoice { kind: BasisKind::Power, degree: 3, include_interactions: true, by_treatment: false }
    }
}

impl BasisChoice {
    pub fn power(degree: u32) -> Self {
        BasisChoice { kind: BasisKind::Power, degree, include_interactions: true, by_treatment: false }
    }

    pub fn additive(degree: u32) -> Self {
        BasisChoice { kind: BasisKind::Power, degree, include_interactions: false, by_treatment: false }
    }

    /// Additive monomials up to `degree`, fully interacted with the treatment.
    pub fn additive_by_treatment(degree: u32) -> Self {
        BasisChoice { kind: BasisKind::Power, degree, include_interactions: false, by_treatment: true }
    }
}

/// Per-coordinate affine map `x -> (x - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub center: f64,
    pub scale: f64,
}

impl Standardization {
    pub const IDENTITY: Standardization = Standardization { center: 0.0, scale: 1.0 };
}

/// Column means and population standard deviations; zero-variance columns get
/// scale 1.
pub fn fit_standardizer(points: &DMatrix<f64>) -> Result<Vec<Standardization>> {
    let n = points.nrows();
    if n < 2 {
        return Err(PseError::DimensionMismatch(format!("standardizer needs at least 2 rows, got {n}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(PseError::NonFiniteInput("standardizer input".into()));
    }
    Ok(points
        .column_iter()
        .map(|col| {
            let center = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - center) * (v - center)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            Standardization { center, scale: if sd > 0.0 { sd } else { 1.0 } }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub degree: u32,
    pub input_dim: usize,
    pub standardizer: Vec<Standardization>,
    pub include_intercept: bool,
    pub include_interactions: bool,
    /// Per-coordinate cap on the monomial power (1 for binary inputs).
    pub max_power: Vec<u32>,
    /// Binary coordinate the basis is stratified by.
    #[serde(default)]
    pub stratify: Option<usize>,
}

impl BasisSpec {
    /// Identity standardization, no binary caps.
    pub fn identity(kind: BasisKind, degree: u32, input_dim: usize) -> Self {
        BasisSpec {
            kind,
            degree,
            input_dim,
            standardizer: vec![Standardization::IDENTITY; input_dim],
            include_intercept: true,
            include_interactions: true,
            max_power: vec![u32::MAX; input_dim],
            stratify: None,
        }
    }

    /// Fits the standardizer to `points` and caps 0/1-valued columns at power 1.
    pub fn fit(choice: &BasisChoice, points: &DMatrix<f64>) -> Result<Self> {
        Self::fit_with_treatment(choice, points, None)
    }

    /// As [`BasisSpec::fit`]; `treatment` names the treatment column, used when
    /// `choice.by_treatment` is set.
    pub fn fit_with_treatment(choice: &BasisChoice, points: &DMatrix<f64>, treatment: Option<usize>) -> Result<Self> {
        let standardizer = fit_standardizer(points)?;
        let max_power: Vec<u32> = points
            .column_iter()
            .map(|col| if col.iter().all(|&v| v == 0.0 || v == 1.0) { 1 } else { u32::MAX })
            .collect();
        let stratify = match (choice.by_treatment, treatment) {
            (true, Some(t)) => {
                if t >= points.ncols() || max_power[t] != 1 {
                    return Err(PseError::Config(format!("column {t} is not a binary treatment column")));
                }
                if points.ncols() < 2 {
                    return Err(PseError::Config("stratified basis needs another coordinate".into()));
                }
                Some(t)
            }
            _ => None,
        };
        Ok(BasisSpec {
            kind: choice.kind,
            degree: choice.degree,
            input_dim: points.ncols(),
            standardizer,
            include_intercept: true,
            include_interactions: choice.include_interactions,
            max_power,
            stratify,
        })
    }

    fn power_of(&self, j: usize) -> u32 {
        self.degree.min(self.max_power[j])
    }

    /// Coordinates entering the monomials (all but the stratifying one).
    fn coords(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.input_dim).filter(move |&j| Some(j) != self.stratify)
    }

    pub fn dim(&self) -> usize {
        let base = self.base_dim();
        if self.stratify.is_some() {
            2 * base
        } else {
            base
        }
    }

    fn base_dim(&self) -> usize {
        let d = self.coords().count();
        match self.kind {
            BasisKind::Power => {
                let mono: usize = self.coords().map(|j| self.power_of(j) as usize).sum();
                let inter = if self.include_interactions && self.degree >= 1 { d * (d - 1) / 2 } else { 0 };
                usize::from(self.include_intercept) + mono + inter
            }
            BasisKind::TensorPower => {
                let full: usize = self.coords().map(|j| self.power_of(j) as usize + 1).product();
                full - usize::from(!self.include_intercept)
            }
        }
    }

    /// Writes the basis evaluated at `point` into `out` (length `self.dim()`).
    pub fn eval_into(&self, point: &[f64], out: &mut [f64]) -> Result<()> {
        if point.len() != self.input_dim {
            return Err(PseError::DimensionMismatch(format!(
                "basis expects {} inputs, got {}",
                self.input_dim,
                point.len()
            )));
        }
        if point.iter().any(|v| !v.is_finite()) {
            return Err(PseError::NonFiniteInput("basis input".into()));
        }
        debug_assert_eq!(out.len(), self.dim());
        let std: Vec<f64> = self
            .coords()
            .map(|j| (point[j] - self.standardizer[j].center) / self.standardizer[j].scale)
            .collect();
        let caps: Vec<u32> = self.coords().map(|j| self.power_of(j)).collect();
        let base = self.base_dim();
        self.eval_base(&std, &caps, &mut out[..base]);
        if let Some(t) = self.stratify {
            let (head, tail) = out.split_at_mut(base);
            for (dst, src) in tail.iter_mut().zip(head.iter()) {
                *dst = point[t] * src;
            }
        }
        Ok(())
    }

    fn eval_base(&self, std: &[f64], caps: &[u32], out: &mut [f64]) {
        let mut c = 0;
        match self.kind {
            BasisKind::Power => {
                if self.include_intercept {
                    out[c] = 1.0;
                    c += 1;
                }
                for (j, &s) in std.iter().enumerate() {
                    let mut p = 1.0;
                    for _ in 0..caps[j] {
                        p *= s;
                        out[c] = p;
                        c += 1;
                    }
                }
                if self.include_interactions && self.degree >= 1 {
                    for i in 0..std.len() {
                        for j in i + 1..std.len() {
                            out[c] = std[i] * std[j];
                            c += 1;
                        }
                    }
                }
            }
            BasisKind::TensorPower => {
                // odometer over exponents, first coordinate fastest
                let mut exps = vec![0u32; std.len()];
                loop {
                    if self.include_intercept || exps.iter().any(|&e| e > 0) {
                        out[c] = exps.iter().zip(std).map(|(&e, &s)| s.powi(e as i32)).product();
                        c += 1;
                    }
                    let mut j = 0;
                    while j < exps.len() && exps[j] == caps[j] {
                        exps[j] = 0;
                        j += 1;
                    }
                    if j == exps.len() {
                        break;
                    }
                    exps[j] += 1;
                }
            }
        }
    }

    pub fn eval(&self, point: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(point, &mut out)?;
        Ok(out)
    }
}

pub fn eval_basis(spec: &BasisSpec, point: &[f64]) -> Result<Vec<f64>> {
    spec.eval(point)
}

/// Row `i` of the result is the basis evaluated at row `i` of `points`.
pub fn design_matrix(spec: &BasisSpec, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = spec.dim();
    let mut out = DMatrix::zeros(points.nrows(), p);
    let mut row = vec![0.0; p];
    let mut pt = vec![0.0; points.ncols()];
    for i in 0..points.nrows() {
        for (j, v) in pt.iter_mut().enumerate() {
            *v = points[(i, j)];
        }
        spec.eval_into(&pt, &mut row).map_err(|e| match e {
            PseError::DimensionMismatch(m) => PseError::DimensionMismatch(format!("row {i}: {m}")),
            PseError::NonFiniteInput(m) => PseError::NonFiniteInput(format!("row {i}: {m}")),
            other => other,
        })?;
        for (j, v) in row.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn standardizer_two_points_and_constant() {
        let pts = DMatrix::from_column_slice(2, 1, &[0.0, 2.0]);
        let s = fit_standardizer(&pts).unwrap();
        assert_eq!(s[0], Standardization { center: 1.0, scale: 1.0 });
        let pts = DMatrix::from_column_slice(3, 1, &[5.0, 5.0, 5.0]);
        assert_eq!(fit_standardizer(&pts).unwrap()[0], Standardization { center: 5.0, scale: 1.0 });
        let pts = DMatrix::from_column_slice(2, 1, &[0.0, f64::NAN]);
        assert!(matches!(fit_standardizer(&pts), Err(PseError::NonFiniteInput(_))));
    }

    #[test]
    fn standardizer_uniform_moments() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        let s = fit_standardizer(&DMatrix::from_column_slice(v.len(), 1, &v)).unwrap()[0];
        assert!((s.center - 0.5).abs() < 0.01);
        assert!((s.scale - (1.0f64 / 12.0).sqrt()).abs() < 0.01);
    }

    #[test]
    fn power_monomials_and_interactions() {
        let spec = BasisSpec::identity(BasisKind::Power, 3, 1);
        assert_eq!(spec.eval(&[2.0]).unwrap(), vec![1.0, 2.0, 4.0, 8.0]);
        let spec = BasisSpec::identity(BasisKind::Power, 1, 2);
        assert_eq!(spec.eval(&[3.0, 5.0]).unwrap(), vec![1.0, 3.0, 5.0, 15.0]);
        let spec = BasisSpec::identity(BasisKind::Power, 2, 3);
        // 1, a, a², b, b², c, c², ab, ac, bc
        assert_eq!(
            spec.eval(&[2.0, 3.0, 5.0]).unwrap(),
            vec![1.0, 2.0, 4.0, 3.0, 9.0, 5.0, 25.0, 6.0, 10.0, 15.0]
        );
    }

    #[test]
    fn tensor_product() {
        let spec = BasisSpec::identity(BasisKind::TensorPower, 1, 2);
        assert_eq!(spec.eval(&[3.0, 5.0]).unwrap(), vec![1.0, 3.0, 5.0, 15.0]);
        let spec = BasisSpec::identity(BasisKind::TensorPower, 2, 2);
        assert_eq!(spec.eval(&[2.0, 3.0]).unwrap(), vec![1.0, 2.0, 4.0, 3.0, 6.0, 12.0, 9.0, 18.0, 36.0]);
    }

    #[test]
    fn binary_columns_capped() {
        let pts = DMatrix::from_row_slice(4, 2, &[0.1, 0.0, 0.5, 1.0, 0.9, 1.0, 0.3, 0.0]);
        let spec = BasisSpec::fit(&BasisChoice::power(3), &pts).unwrap();
        assert_eq!(spec.max_power, vec![u32::MAX, 1]);
        // 1 + 3 + 1 + 1 interaction
        assert_eq!(spec.dim(), 6);
    }

    #[test]
    fn design_matrix_rows() {
        let spec = BasisSpec::identity(BasisKind::Power, 0, 2);
        let pts = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = design_matrix(&spec, &pts).unwrap();
        assert_eq!(d.shape(), (3, 1));
        assert!(d.iter().all(|&v| v == 1.0));

        let spec = BasisSpec::identity(BasisKind::Power, 2, 2);
        let pts = DMatrix::from_row_slice(2, 2, &[1.5, -2.0, 1.5, -2.0]);
        let d = design_matrix(&spec, &pts).unwrap();
        assert_eq!(d.row(0), d.row(1));
        assert_eq!(d.row(0).iter().copied().collect::<Vec<_>>(), spec.eval(&[1.5, -2.0]).unwrap());

        let bad = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        assert!(matches!(design_matrix(&spec, &bad), Err(PseError::DimensionMismatch(_))));
    }

    #[test]
    fn stratified_by_treatment() {
        // columns (w, a); additive cubic in w, doubled by a
        let pts = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 1.0, 2.0, 1.0, -1.0, 0.0]);
        let mut spec = BasisSpec::fit_with_treatment(&BasisChoice::additive_by_treatment(3), &pts, Some(1)).unwrap();
        spec.standardizer = vec![Standardization::IDENTITY; 2];
        assert_eq!(spec.dim(), 8);
        assert_eq!(spec.eval(&[2.0, 0.0]).unwrap(), vec![1.0, 2.0, 4.0, 8.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(spec.eval(&[2.0, 1.0]).unwrap(), vec![1.0, 2.0, 4.0, 8.0, 1.0, 2.0, 4.0, 8.0]);
        // a continuous column cannot stratify
        assert!(BasisSpec::fit_with_treatment(&BasisChoice::additive_by_treatment(3), &pts, Some(0)).is_err());
        // without the flag the column is ordinary
        let plain = BasisSpec::fit_with_treatment(&BasisChoice::additive(3), &pts, Some(1)).unwrap();
        assert_eq!(plain.stratify, None);
        assert_eq!(plain.dim(), 5);
    }

    fn brute_dim(kind: BasisKind, degree: u32, d: usize) -> usize {
        match kind {
            BasisKind::Power => 1 + degree as usize * d + if degree >= 1 { d * (d - 1) / 2 } else { 0 },
            BasisKind::TensorPower => (degree as usize + 1).pow(d as u32),
        }
    }

    #[test]
    fn dimension_sweep() {
        for kind in [BasisKind::Power, BasisKind::TensorPower] {
            for degree in 0..=4 {
                for d in 1..=5 {
                    let spec = BasisSpec::identity(kind, degree, d);
                    let v = spec.eval(&vec![0.7; d]).unwrap();
                    assert_eq!(v.len(), spec.dim());
                    assert_eq!(v.len(), brute_dim(kind, degree, d));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn standardization_is_affine_prefix(
            x in prop::collection::vec(-5.0f64..5.0, 3),
            c in prop::collection::vec(-2.0f64..2.0, 3),
            s in prop::collection::vec(0.1f64..4.0, 3),
            tensor in any::<bool>(),
        ) {
            let kind = if tensor { BasisKind::TensorPower } else { BasisKind::Power };
            let mut spec = BasisSpec::identity(kind, 3, 3);
            spec.standardizer = c.iter().zip(&s).map(|(&center, &scale)| Standardization { center, scale }).collect();
            let ident = BasisSpec::identity(kind, 3, 3);
            let z: Vec<f64> = x.iter().zip(c.iter().zip(&s)).map(|(x, (c, s))| (x - c) / s).collect();
            prop_assert_eq!(spec.eval(&x).unwrap(), ident.eval(&z).unwrap());
            prop_assert_eq!(spec.eval(&x).unwrap(), spec.eval(&x).unwrap());
        }
    }
}
