//! Dense least-squares machinery shared by the series, odds, weight and
//! representer fits.
//!
//! Every solve goes through a Householder QR. When the triangular factor is
//! numerically singular, a ridge `eps * (||X||_F^2 / p) * I` is appended as extra
//! rows, with `eps` escalating by ×10 from 1e-10 up to 1e-2.

use nalgebra::{DMatrix, DVector};

use crate::error::{PseError, Result};

/// Smallest acceptable ratio `min |R_jj| / max |R_jj|` for an unridged solve.
pub const RCOND_TOL: f64 = 1e-10;
pub const RIDGE_START: f64 = 1e-10;
pub const RIDGE_MAX: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct SolveDiagnostics {
    /// Relative ridge actually used (0 when the plain solve succeeded).
    pub ridge: f64,
    /// `max |R_jj| / min |R_jj|` of the unridged factor.
    pub condition: f64,
    /// Number of `|R_jj|` above `RCOND_TOL * max |R_jj|`.
    pub effective_rank: usize,
}

fn diag_stats(r: &DMatrix<f64>) -> (f64, f64, usize) {
    let k = r.nrows().min(r.ncols());
    let d: Vec<f64> = (0..k).map(|j| r[(j, j)].abs()).collect();
    let max = d.iter().cloned().fold(0.0, f64::max);
    let min = if k < r.ncols() { 0.0 } else { d.iter().cloned().fold(f64::INFINITY, f64::min) };
    let rank = d.iter().filter(|&&v| v > RCOND_TOL * max).count();
    (max, min, rank)
}

fn qr_solve(x: DMatrix<f64>, v: DVector<f64>) -> Option<DVector<f64>> {
    let p = x.ncols();
    let qr = x.qr();
    let r = qr.r();
    let (max, min, _) = diag_stats(&r);
    if !(max > 0.0) || !(min / max >= RCOND_TOL) || !min.is_finite() {
        return None;
    }
    let mut rhs = v;
    qr.q_tr_mul(&mut rhs);
    let top = rhs.rows(0, p).into_owned();
    let sol = r.rows(0, p).into_owned().solve_upper_triangular(&top)?;
    sol.iter().all(|c| c.is_finite()).then_some(sol)
}

/// Minimizes `||X c - v||^2`, falling back to the escalating ridge when `X` is
/// rank deficient.
pub fn least_squares(x: &DMatrix<f64>, v: &DVector<f64>) -> Result<(DVector<f64>, SolveDiagnostics)> {
    if x.iter().chain(v.iter()).any(|a| !a.is_finite()) {
        return Err(PseError::NonFiniteInput("least-squares system".into()));
    }
    let (m, p) = x.shape();
    let (condition, effective_rank) = if m >= p {
        let r = x.clone().qr().r();
        let (max, min, rank) = diag_stats(&r);
        (max / min, rank)
    } else {
        (f64::INFINITY, m)
    };
    if m >= p && condition.is_finite() && 1.0 / condition >= RCOND_TOL {
        if let Some(c) = qr_solve(x.clone(), v.clone()) {
            return Ok((c, SolveDiagnostics { ridge: 0.0, condition, effective_rank }));
        }
    }
    let scale = {
        let s = x.norm_squared() / p as f64;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    };
    let mut eps = RIDGE_START;
    while eps <= RIDGE_MAX * (1.0 + 1e-9) {
        let mut aug = DMatrix::zeros(m + p, p);
        aug.rows_mut(0, m).copy_from(x);
        let lam = (eps * scale).sqrt();
        for j in 0..p {
            aug[(m + j, j)] = lam;
        }
        let mut rhs = DVector::zeros(m + p);
        rhs.rows_mut(0, m).copy_from(v);
        if let Some(c) = qr_solve(aug, rhs) {
            return Ok((c, SolveDiagnostics { ridge: eps, condition, effective_rank }));
        }
        eps *= 10.0;
    }
    Err(PseError::UnsolvableSystem { ridge: RIDGE_MAX })
}

/// Weighted least squares on the rows with positive weight. Rows with zero
/// weight are dropped before the solve.
pub fn weighted_least_squares(
    design: &DMatrix<f64>,
    response: &[f64],
    weights: Option<&[f64]>,
) -> Result<(DVector<f64>, SolveDiagnostics)> {
    let n = design.nrows();
    if response.len() != n {
        return Err(PseError::LengthMismatch(n, response.len()));
    }
    let rows: Vec<(usize, f64)> = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(PseError::LengthMismatch(n, w.len()));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(PseError::NonFiniteInput("weights must be finite and non-negative".into()));
            }
            w.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, &v)| (i, v.sqrt())).collect()
        }
        None => (0..n).map(|i| (i, 1.0)).collect(),
    };
    if rows.is_empty() {
        return Err(PseError::AllZeroWeights);
    }
    let p = design.ncols();
    let mut x = DMatrix::zeros(rows.len(), p);
    let mut v = DVector::zeros(rows.len());
    for (o, &(i, sw)) in rows.iter().enumerate() {
        for j in 0..p {
            x[(o, j)] = sw * design[(i, j)];
        }
        v[o] = sw * response[i];
    }
    least_squares(&x, &v)
}

/// Minimizes `0.5 ||G b||^2 - c'b`, i.e. solves `G'G b = c` through a QR of `G`
/// (ridge-augmented when `G` is rank deficient).
pub fn solve_quadratic(g: &DMatrix<f64>, c: &DVector<f64>) -> Result<(DVector<f64>, SolveDiagnostics)> {
    let (m, p) = g.shape();
    if c.len() != p {
        return Err(PseError::LengthMismatch(p, c.len()));
    }
    if g.iter().chain(c.iter()).any(|a| !a.is_finite()) {
        return Err(PseError::NonFiniteInput("quadratic system".into()));
    }
    let scale = {
        let s = g.norm_squared() / p as f64;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    };
    let mut condition = f64::INFINITY;
    let mut effective_rank = 0;
    let mut eps = 0.0;
    loop {
        let aug = if eps == 0.0 {
            g.clone()
        } else {
            let mut a = DMatrix::zeros(m + p, p);
            a.rows_mut(0, m).copy_from(g);
            for j in 0..p {
                a[(m + j, j)] = (eps * scale).sqrt();
            }
            a
        };
        if aug.nrows() >= p {
            let r = aug.qr().r();
            let (max, min, rank) = diag_stats(&r);
            if eps == 0.0 {
                condition = max / min;
                effective_rank = rank;
            }
            // G'G squares the condition number, so demand the square root of the usual threshold
            if max > 0.0 && min / max >= RCOND_TOL.sqrt() {
                let r = r.rows(0, p).into_owned();
                let y = r.transpose().solve_lower_triangular(c);
                if let Some(b) = y.and_then(|y| r.solve_upper_triangular(&y)) {
                    if b.iter().all(|v| v.is_finite()) {
                        return Ok((b, SolveDiagnostics { ridge: eps, condition, effective_rank }));
                    }
                }
            }
        }
        eps = if eps == 0.0 { RIDGE_START } else { eps * 10.0 };
        if eps > RIDGE_MAX * (1.0 + 1e-9) {
            return Err(PseError::UnsolvableSystem { ridge: RIDGE_MAX });
        }
    }
}

/// Series projection `Ê(V | W) = H V` onto the span of a design matrix `P`.
///
/// `H = S S'`. `T` is chosen so that `||H v||^2 = ||T' v||^2`; without ridge
/// `S = T = Q` from the thin QR of `P`.
#[derive(Debug, Clone)]
pub struct Projector {
    s: DMatrix<f64>,
    t: DMatrix<f64>,
    pub diagnostics: SolveDiagnostics,
}

impl Projector {
    pub fn new(p: &DMatrix<f64>) -> Result<Self> {
        if p.iter().any(|a| !a.is_finite()) {
            return Err(PseError::NonFiniteInput("projection design".into()));
        }
        let (n, l) = p.shape();
        if n >= l {
            let qr = p.clone().qr();
            let r = qr.r();
            let (max, min, rank) = diag_stats(&r);
            if max > 0.0 && min / max >= RCOND_TOL {
                let q = qr.q();
                return Ok(Projector {
                    s: q.clone(),
                    t: q,
                    diagnostics: SolveDiagnostics { ridge: 0.0, condition: max / min, effective_rank: rank },
                });
            }
        }
        let gram = p.transpose() * p;
        let scale = {
            let s = gram.trace() / l as f64;
            if s > 0.0 {
                s
            } else {
                1.0
            }
        };
        let mut eps = RIDGE_START;
        while eps <= RIDGE_MAX * (1.0 + 1e-9) {
            let mut m = gram.clone();
            for j in 0..l {
                m[(j, j)] += eps * scale;
            }
            if let Some(chol) = m.cholesky() {
                // S = P L^{-T}
                let lt = chol.l().transpose();
                let s_t = lt.transpose().solve_lower_triangular(&p.transpose());
                if let Some(s_t) = s_t {
                    let s = s_t.transpose();
                    let g = s.transpose() * &s;
                    if let Some(gc) = g.cholesky() {
                        let t = &s * gc.l();
                        return Ok(Projector {
                            s,
                            t,
                            diagnostics: SolveDiagnostics { ridge: eps, condition: f64::INFINITY, effective_rank: l.min(n) },
                        });
                    }
                }
            }
            eps *= 10.0;
        }
        Err(PseError::UnsolvableSystem { ridge: RIDGE_MAX })
    }

    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    pub fn rank_dim(&self) -> usize {
        self.t.ncols()
    }

    /// `H v`.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.s * (self.s.transpose() * v)
    }

    /// `T' v`, with `||T' v|| = ||H v||`.
    pub fn reduce(&self, v: &DVector<f64>) -> DVector<f64> {
        self.t.transpose() * v
    }

    /// `T' M` for a matrix argument.
    pub fn reduce_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.t.transpose() * m
    }

    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_solved_two_by_two() {
        // x = 0,1,2 ; V = 1,2,5 ; normal equations [[3,3],[3,5]] c = [8,12]
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let (c, d) = weighted_least_squares(&x, &[1.0, 2.0, 5.0], Some(&[1.0, 1.0, 1.0])).unwrap();
        assert!((c[0] - 2.0 / 3.0).abs() < 1e-12 && (c[1] - 2.0).abs() < 1e-12);
        assert_eq!(d.ridge, 0.0);
        assert_eq!(d.effective_rank, 2);
    }

    #[test]
    fn collinear_design_gets_ridge() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 1.0, 2.0, 1.0, 2.0, 4.0, 1.0, 3.0, 6.0, 1.0, 4.0, 8.0]);
        let (c, d) = weighted_least_squares(&x, &[1.0, 2.0, 3.0, 4.0], None).unwrap();
        assert!(d.ridge > 0.0);
        let fit = &x * &c;
        for (i, v) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            assert!((fit[i] - v).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_weights() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        assert!(matches!(
            weighted_least_squares(&x, &[1.0, 2.0], Some(&[0.0, 0.0])),
            Err(PseError::AllZeroWeights)
        ));
    }

    #[test]
    fn projector_matches_hat_matrix() {
        let p = DMatrix::from_row_slice(5, 2, &[1.0, 0.1, 1.0, 0.4, 1.0, 0.5, 1.0, 0.9, 1.0, 1.3]);
        let proj = Projector::new(&p).unwrap();
        let h = &p * (p.transpose() * &p).try_inverse().unwrap() * p.transpose();
        let v = DVector::from_column_slice(&[0.3, -1.0, 2.0, 0.5, 0.0]);
        let hv = &h * &v;
        assert!((proj.project(&v) - &hv).norm() < 1e-12);
        assert!((proj.reduce(&v).norm_squared() - hv.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn ridged_projector_norm_identity() {
        // duplicated column forces the ridge path
        let p = DMatrix::from_row_slice(4, 3, &[1.0, 0.1, 0.1, 1.0, 0.4, 0.4, 1.0, 0.5, 0.5, 1.0, 0.9, 0.9]);
        let proj = Projector::new(&p).unwrap();
        assert!(proj.diagnostics.ridge > 0.0);
        let v = DVector::from_column_slice(&[0.3, -1.0, 2.0, 0.5]);
        let hv = proj.project(&v);
        assert!((proj.reduce(&v).norm_squared() - hv.norm_squared()).abs() < 1e-10);
    }

    #[test]
    fn quadratic_solution() {
        let g = DMatrix::from_row_slice(3, 2, &[2.0, 0.0, 1.0, 1.0, 0.0, 3.0]);
        let c = DVector::from_column_slice(&[1.0, -2.0]);
        let (b, _) = solve_quadratic(&g, &c).unwrap();
        let resid = g.transpose() * &g * &b - &c;
        assert!(resid.norm() < 1e-12);
    }
}
