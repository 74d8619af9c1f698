//! The MLE objective f(gamma) = log|Sigma| + Tr(Sigma^{-1} Sigma_hat) with
//! Sigma = S Gamma S^H + sigma_w^2 I, its gradient, and the first-order
//! optimality residual.

use faer::linalg::matmul::matmul;
use faer::linalg::solvers::{DenseSolveCore, Llt, Solve};
use faer::{Accum, Mat, MatRef, Par, Side};
use nalgebra::Complex;
use thiserror::Error;

use crate::{C64, CMatrix, RVector};

/// Zero-copy column-major view of a nalgebra matrix for faer kernels.
fn fview(m: &CMatrix) -> MatRef<'_, C64> {
    MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

fn to_nalgebra(m: MatRef<'_, C64>) -> CMatrix {
    CMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

const ONE: C64 = Complex::new(1.0, 0.0);

/// Sigma = sigma_w^2 I + sum_j w_j s_j s_j^H over the weighted columns,
/// assembled as a single rank-k product.
fn assemble_sigma(s: &CMatrix, weights: &[(usize, f64)], sigma_w_sq: f64) -> Mat<C64> {
    let l = s.nrows();
    let mut sigma = Mat::<C64>::zeros(l, l);
    for i in 0..l {
        sigma[(i, i)] = Complex::new(sigma_w_sq, 0.0);
    }
    if !weights.is_empty() {
        let mut w = Mat::<C64>::zeros(l, weights.len());
        for (j, (idx, val)) in weights.iter().enumerate() {
            let scale = val.sqrt();
            for i in 0..l {
                w[(i, j)] = s[(i, *idx)] * scale;
            }
        }
        matmul(&mut sigma, Accum::Add, &w, w.adjoint(), ONE, Par::Seq);
    }
    sigma
}

fn llt_and_log_det(sigma: Mat<C64>) -> Result<(Llt<C64>, f64), ObjectiveError> {
    let l = sigma.nrows();
    let chol = sigma
        .llt(Side::Lower)
        .map_err(|_| ObjectiveError::NotPositiveDefinite)?;
    let log_det = 2.0 * (0..l).map(|i| chol.L()[(i, i)].re.ln()).sum::<f64>();
    Ok((chol, log_det))
}

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("covariance factorization failed; sigma_w_sq must be positive")]
    NotPositiveDefinite,
    #[error("state is stale: built for gamma version {built}, current {current}")]
    StaleState { built: u64, current: u64 },
    #[error("state was incrementally updated; refresh before use")]
    NeedsRefresh,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Nonnegative vector of sequence powers gamma, indexed flat or by
/// (device, sequence). Carries a monotone version counter so cached
/// factorizations can detect staleness in O(1).
#[derive(Debug, Clone)]
pub struct GammaVector {
    values: RVector,
    version: u64,
}

impl PartialEq for GammaVector {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values
    }
}

impl GammaVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: RVector::zeros(len),
            version: 0,
        }
    }

    pub fn from_values(values: RVector) -> Self {
        assert!(
            values.iter().all(|v| *v >= 0.0),
            "gamma entries must be nonnegative"
        );
        Self { values, version: 0 }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }

    pub fn values(&self) -> &RVector {
        &self.values
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn set(&mut self, idx: usize, value: f64) {
        assert!(value >= 0.0, "gamma entries must be nonnegative");
        self.values[idx] = value;
        self.version += 1;
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Indices and values of the strictly positive entries.
    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, v)| *v > 0.0)
    }

    pub fn support_indices(&self) -> Vec<usize> {
        self.support().map(|(i, _)| i).collect()
    }
}

/// Euclidean norm of the projected-gradient residual
/// [gamma - grad]_+ - gamma; zero exactly at first-order stationary points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidual {
    pub value: f64,
}

pub fn kkt_residual(gamma: &GammaVector, grad_full: &RVector) -> KktResidual {
    assert_eq!(gamma.len(), grad_full.len());
    let value = residual_norm(gamma.values(), grad_full);
    KktResidual { value }
}

/// Residual norm over raw slices; shared with the subproblem solver.
pub(crate) fn residual_norm(x: &RVector, grad: &RVector) -> f64 {
    x.iter()
        .zip(grad.iter())
        .map(|(xi, gi)| {
            let proj = (xi - gi).max(0.0);
            (proj - xi).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Fresh factorization of Sigma(x) for line searches: only the Cholesky
/// factor and the objective value are formed, and the gradient is
/// computed on demand through triangular solves, without materializing
/// Sigma^{-1} or B. Suited to inner loops that discard most trial points.
pub struct LeanState {
    chol: Llt<C64>,
    objective: f64,
}

impl LeanState {
    /// Assembles and factorizes Sigma = S diag(x) S^H + sigma_w^2 I and
    /// evaluates f(x) = log det Sigma + Tr(Sigma^{-1} Sigma_hat).
    pub fn factorize(
        s: &CMatrix,
        x: &RVector,
        sigma_hat: &CMatrix,
        sigma_w_sq: f64,
    ) -> Result<Self, ObjectiveError> {
        let l = s.nrows();
        let weights: Vec<(usize, f64)> = x
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, v)| *v > 0.0)
            .collect();
        let sigma = assemble_sigma(s, &weights, sigma_w_sq);
        let (chol, log_det) = llt_and_log_det(sigma)?;
        let solved = chol.solve(fview(sigma_hat));
        let trace: f64 = (0..l).map(|i| solved[(i, i)].re).sum();
        Ok(Self {
            chol,
            objective: log_det + trace,
        })
    }

    pub fn objective(&self) -> f64 {
        self.objective
    }

    /// Gradient over every column of s at the factorized point:
    /// [grad]_j = s_j^H Sigma^{-1} s_j - u_j^H Sigma_hat u_j with
    /// u_j = Sigma^{-1} s_j.
    pub fn gradient(&self, s: &CMatrix, sigma_hat: &CMatrix) -> RVector {
        let l = s.nrows();
        let m = s.ncols();
        let u = self.chol.solve(fview(s));
        let mut t = Mat::<C64>::zeros(l, m);
        matmul(&mut t, Accum::Replace, fview(sigma_hat), &u, ONE, Par::Seq);
        RVector::from_fn(m, |j, _| {
            let mut a = 0.0;
            let mut b = 0.0;
            for i in 0..l {
                a += (s[(i, j)].conj() * u[(i, j)]).re;
                b += (u[(i, j)].conj() * t[(i, j)]).re;
            }
            a - b
        })
    }
}

/// Cached factorization of Sigma(gamma) plus the derived matrices used by
/// gradient evaluation: A = Sigma^{-1} and B = Sigma^{-1} Sigma_hat
/// Sigma^{-1}.
pub struct CovarianceState {
    chol: Llt<C64>,
    log_det: f64,
    inv: CMatrix,
    b: CMatrix,
    gamma_snapshot: u64,
    /// Set when the inverse has been modified by incremental rank-one
    /// updates; log_det, chol, and b are then out of date.
    needs_refresh: bool,
    /// Set when a degenerate rank-one denominator was encountered; the
    /// cached inverse itself can no longer be trusted and callers must
    /// refactorize before further incremental updates.
    inverse_unreliable: bool,
}

impl CovarianceState {
    /// Assembles Sigma = S Gamma S^H + sigma_w^2 I over the support of
    /// gamma, factorizes it, and materializes A and B.
    pub fn build(
        s: &CMatrix,
        gamma: &GammaVector,
        sigma_hat: &CMatrix,
        sigma_w_sq: f64,
    ) -> Result<Self, ObjectiveError> {
        if s.ncols() != gamma.len() {
            return Err(ObjectiveError::DimensionMismatch(format!(
                "S has {} columns but gamma has {} entries",
                s.ncols(),
                gamma.len()
            )));
        }
        let l = s.nrows();
        if sigma_hat.nrows() != l || sigma_hat.ncols() != l {
            return Err(ObjectiveError::DimensionMismatch(
                "sample covariance must be L x L".into(),
            ));
        }
        let support: Vec<(usize, f64)> = gamma.support().collect();
        let sigma = assemble_sigma(s, &support, sigma_w_sq);
        let (chol, log_det) = llt_and_log_det(sigma)?;
        let inv_f = chol.inverse();
        let mut tmp = Mat::<C64>::zeros(l, l);
        matmul(&mut tmp, Accum::Replace, &inv_f, fview(sigma_hat), ONE, Par::Seq);
        let mut b_f = Mat::<C64>::zeros(l, l);
        matmul(&mut b_f, Accum::Replace, &tmp, &inv_f, ONE, Par::Seq);
        let inv = to_nalgebra(inv_f.as_ref());
        let mut b = to_nalgebra(b_f.as_ref());
        hermitianize(&mut b);
        Ok(Self {
            chol,
            log_det,
            inv,
            b,
            gamma_snapshot: gamma.version(),
            needs_refresh: false,
            inverse_unreliable: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.inv.nrows()
    }

    pub fn gamma_snapshot(&self) -> u64 {
        self.gamma_snapshot
    }

    pub fn is_fresh_for(&self, gamma: &GammaVector) -> bool {
        !self.needs_refresh && self.gamma_snapshot == gamma.version()
    }

    /// Sigma^{-1}.
    pub fn inverse(&self) -> &CMatrix {
        &self.inv
    }

    /// Sigma^{-1} Sigma_hat Sigma^{-1}.
    pub fn quad_matrix(&self) -> &CMatrix {
        &self.b
    }

    pub fn cholesky_factor(&self) -> CMatrix {
        let l = self.chol.L();
        let n = l.nrows();
        // The factor's strict upper triangle is not guaranteed zeroed.
        CMatrix::from_fn(n, n, |i, j| if j <= i { l[(i, j)] } else { Complex::ZERO })
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    fn ensure_current(&self) -> Result<(), ObjectiveError> {
        if self.needs_refresh {
            Err(ObjectiveError::NeedsRefresh)
        } else {
            Ok(())
        }
    }

    /// f(gamma) = log|Sigma| + Tr(Sigma^{-1} Sigma_hat).
    pub fn evaluate(&self, sigma_hat: &CMatrix) -> Result<f64, ObjectiveError> {
        self.ensure_current()?;
        // Tr(A Sigma_hat) = sum_ij A_ij conj(Sigma_hat_ij) for Hermitian
        // Sigma_hat; the trace is real.
        let trace: f64 = self
            .inv
            .iter()
            .zip(sigma_hat.iter())
            .map(|(a, s)| a.re * s.re + a.im * s.im)
            .sum();
        Ok(self.log_det + trace)
    }

    /// Gradient entries s_i^H A s_i - s_i^H B s_i for each requested
    /// column index; O(|indices| L^2) given the cached A and B.
    pub fn gradient(
        &self,
        s: &CMatrix,
        indices: &[usize],
        gamma: &GammaVector,
    ) -> Result<RVector, ObjectiveError> {
        self.ensure_current()?;
        if gamma.version() != self.gamma_snapshot {
            return Err(ObjectiveError::StaleState {
                built: self.gamma_snapshot,
                current: gamma.version(),
            });
        }
        Ok(self.gradient_unchecked(s, indices))
    }

    pub(crate) fn gradient_unchecked(&self, s: &CMatrix, indices: &[usize]) -> RVector {
        let l = s.nrows();
        let m = indices.len();
        let gathered;
        let cols = if m == s.ncols() && indices.iter().enumerate().all(|(j, &i)| i == j) {
            fview(s)
        } else {
            let mut c = CMatrix::zeros(l, m);
            for (j, idx) in indices.iter().enumerate() {
                c.column_mut(j).copy_from(&s.column(*idx));
            }
            gathered = c;
            fview(&gathered)
        };
        let mut au = Mat::<C64>::zeros(l, m);
        matmul(&mut au, Accum::Replace, fview(&self.inv), cols, ONE, Par::Seq);
        let mut bu = Mat::<C64>::zeros(l, m);
        matmul(&mut bu, Accum::Replace, fview(&self.b), cols, ONE, Par::Seq);
        RVector::from_fn(m, |j, _| {
            let mut a = 0.0;
            let mut b = 0.0;
            for i in 0..l {
                a += (cols[(i, j)].conj() * au[(i, j)]).re;
                b += (cols[(i, j)].conj() * bu[(i, j)]).re;
            }
            a - b
        })
    }

    /// Full gradient over all NQ columns; O(NQ L^2).
    pub fn gradient_full(
        &self,
        s: &CMatrix,
        gamma: &GammaVector,
    ) -> Result<RVector, ObjectiveError> {
        let all: Vec<usize> = (0..s.ncols()).collect();
        self.gradient(s, &all, gamma)
    }

    /// Exact minimizer of f along coordinate direction e (the column s),
    /// clipped at the feasibility bound d >= -gamma_i, together with the
    /// rank-one refresh of the cached inverse A = Sigma^{-1} and the
    /// consistent update of B = A Sigma_hat A.
    ///
    /// With u = A s and w = B s, the quadratic forms are a = Re(s^H u)
    /// and b = Re(s^H w), and after A <- A - c u u^H (c = d/(1+da)) the
    /// trace matrix becomes
    ///   B <- B - c u w^H - c (w - c b u) u^H,
    /// using u^H Sigma_hat u = s^H B s = b.
    ///
    /// Returns the step d*. When the guarded denominator check fails the
    /// state is flagged for a full refactorization and no update is made.
    pub fn coordinate_minimize(
        &mut self,
        s_col: nalgebra::DVectorView<'_, C64>,
        gamma_i: f64,
    ) -> f64 {
        let u = &self.inv * s_col;
        let a = s_col.dotc(&u).re;
        let w = &self.b * s_col;
        let b = s_col.dotc(&w).re;
        let d = ((b - a) / (a * a)).max(-gamma_i);
        if d == 0.0 {
            return 0.0;
        }
        let denom = 1.0 + d * a;
        if denom <= f64::EPSILON {
            // Infeasible for exact arithmetic; force a rebuild instead of
            // corrupting the inverse.
            self.needs_refresh = true;
            self.inverse_unreliable = true;
            return 0.0;
        }
        let c = d / denom;
        let neg_c = Complex::new(-c, 0.0);
        self.inv.gerc(neg_c, &u, &u, Complex::new(1.0, 0.0));
        let w_adj = &w - &u * Complex::new(c * b, 0.0);
        self.b.gerc(neg_c, &u, &w, Complex::new(1.0, 0.0));
        self.b.gerc(neg_c, &w_adj, &u, Complex::new(1.0, 0.0));
        // chol and log_det are now stale; inv and b remain consistent.
        self.needs_refresh = true;
        self.gamma_snapshot = u64::MAX;
        d
    }

    /// Whether incremental updates have invalidated the factorization.
    pub fn needs_refresh(&self) -> bool {
        self.needs_refresh
    }

    /// Whether the cached inverse itself is unusable for further
    /// incremental updates (as opposed to merely the factorization and
    /// trace caches being stale).
    pub fn inverse_unreliable(&self) -> bool {
        self.inverse_unreliable
    }
}

fn hermitianize(m: &mut CMatrix) {
    let adj = m.adjoint();
    *m += adj;
    *m *= Complex::new(0.5, 0.0);
}
