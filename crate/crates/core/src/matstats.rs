//! Distributional kernels shared by the sampler, the predictor and the
//! simulators.
//!
//! Everything is parameterized by covariance. Where a precision appears (the
//! Wishart priors sit on precision matrices) callers invert explicitly, and
//! only ever for small `d x d` matrices.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;

/// Symmetric positive-definite matrix with its Cholesky factor cached.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    m: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl SpdMatrix {
    /// Validates symmetry (to `1e-10` relative to the largest entry) and
    /// strict positive definiteness. The stored matrix is exactly symmetric.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dim(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotSpd("non-finite entry".into()));
        }
        let scale = m.amax().max(1.0);
        let asym = (&m - m.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSpd(format!("asymmetry {asym:e}")));
        }
        let m = (&m + m.transpose()) * 0.5;
        let chol = m
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotSpd("Cholesky factorization failed".into()))?;
        Ok(SpdMatrix { m, chol })
    }

    pub fn identity(d: usize) -> Self {
        SpdMatrix::new(DMatrix::identity(d, d)).expect("identity is SPD")
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    /// Lower-triangular factor `L` with `L * L^T = M`.
    pub fn chol_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..self.dim()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Explicit inverse. Intended for the small trait-dimension matrices.
    pub fn inverse(&self) -> Result<SpdMatrix> {
        SpdMatrix::new(self.chol.inverse())
    }

    /// Squared Mahalanobis norm `v^T M^{-1} v`.
    pub fn quad_inv(&self, v: &DVector<f64>) -> f64 {
        let w = self
            .chol
            .l_dirty()
            .solve_lower_triangular(v)
            .expect("Cholesky factor has a positive diagonal");
        w.norm_squared()
    }

    pub fn scaled(&self, factor: f64) -> Result<SpdMatrix> {
        SpdMatrix::new(&self.m * factor)
    }
}

/// Wishart law `W_d(V, nu)` with `E[W] = nu * V`.
#[derive(Debug, Clone)]
pub struct WishartPrior {
    scale: SpdMatrix,
    dof: f64,
}

impl WishartPrior {
    pub fn new(scale: SpdMatrix, dof: f64) -> Result<Self> {
        let d = scale.dim();
        if !(dof > d as f64 - 1.0) || !dof.is_finite() {
            return Err(Error::ImproperPrior { dof, dim: d });
        }
        Ok(WishartPrior { scale, dof })
    }

    pub fn scale(&self) -> &SpdMatrix {
        &self.scale
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }

    pub fn dim(&self) -> usize {
        self.scale.dim()
    }
}

/// Kronecker product: block `(i, j)` of the result is `a[(i, j)] * b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            let mut block = out.view_mut((i * br, j * bc), (br, bc));
            block.zip_apply(b, |o, bv| *o = aij * bv);
        }
    }
    out
}

/// Column-stacking `vec` of a matrix.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Log-density of `N_q(mu, cov)` at `x`.
pub fn mvn_logpdf(x: &DVector<f64>, mu: &DVector<f64>, cov: &SpdMatrix) -> Result<f64> {
    let q = cov.dim();
    if x.len() != q || mu.len() != q {
        return Err(Error::Dim(format!(
            "mvn of dimension {q} evaluated at vectors of length {} and {}",
            x.len(),
            mu.len()
        )));
    }
    let r = x - mu;
    Ok(-0.5 * (q as f64 * (2.0 * PI).ln() + cov.log_det() + cov.quad_inv(&r)))
}

/// Log-density of the matrix normal `MN(M, A, B)` for a `d x n` matrix `X`,
/// with column (between-individual) covariance `A` (`n x n`) and row
/// (within-individual) covariance `B` (`d x d`). Equivalent to a normal on
/// `vec(X)` with covariance `A ⊗ B`.
pub fn matnorm_logpdf(
    x: &DMatrix<f64>,
    m: &DMatrix<f64>,
    a: &SpdMatrix,
    b: &SpdMatrix,
) -> Result<f64> {
    let (d, n) = x.shape();
    if m.shape() != (d, n) || a.dim() != n || b.dim() != d {
        return Err(Error::Dim(format!(
            "X is {d}x{n}, M is {}x{}, A is {}x{}, B is {}x{}",
            m.nrows(),
            m.ncols(),
            a.dim(),
            a.dim(),
            b.dim(),
            b.dim()
        )));
    }
    let e = x - m;
    // tr(A^{-1} E^T B^{-1} E) = || L_B^{-1} E L_A^{-T} ||_F^2
    let f = b
        .chol_l()
        .solve_lower_triangular(&e)
        .ok_or_else(|| Error::NotSpd("row covariance".into()))?;
    let gt = a
        .chol_l()
        .solve_lower_triangular(&f.transpose())
        .ok_or_else(|| Error::NotSpd("column covariance".into()))?;
    let quad = gt.norm_squared();
    let nd = (n * d) as f64;
    Ok(-0.5 * (nd * (2.0 * PI).ln() + d as f64 * a.log_det() + n as f64 * b.log_det() + quad))
}

pub fn standard_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn sample_mvn<R: Rng + ?Sized>(mu: &DVector<f64>, cov: &SpdMatrix, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(mu.len(), |_, _| rng.sample(StandardNormal));
    mu + cov.chol_l() * z
}

/// Draws `M + L_B G L_A^T` with `G` iid standard normal, i.e. `MN(M, A, B)`.
pub fn sample_matnorm<R: Rng + ?Sized>(
    m: &DMatrix<f64>,
    a: &SpdMatrix,
    b: &SpdMatrix,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (d, n) = m.shape();
    if a.dim() != n || b.dim() != d {
        return Err(Error::Dim(format!(
            "mean is {d}x{n} but covariances are {}x{} and {}x{}",
            a.dim(),
            a.dim(),
            b.dim(),
            b.dim()
        )));
    }
    let g = standard_normal_matrix(d, n, rng);
    Ok(m + b.chol_l() * g * a.chol_l().transpose())
}

/// Bartlett construction of a `W_d(V, nu)` draw.
pub fn sample_wishart<R: Rng + ?Sized>(prior: &WishartPrior, rng: &mut R) -> Result<SpdMatrix> {
    let d = prior.dim();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi2 = ChiSquared::new(prior.dof - i as f64)
            .map_err(|e| Error::breakdown(format!("chi-square draw: {e}")))?;
        a[(i, i)] = chi2.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = prior.scale.chol_l() * a;
    SpdMatrix::new(&la * la.transpose()).map_err(|e| Error::breakdown(format!("Wishart draw: {e}")))
}

/// Draws the inverse of a `W_d(V, nu)` draw.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(
    prior: &WishartPrior,
    rng: &mut R,
) -> Result<SpdMatrix> {
    sample_wishart(prior, rng)?
        .inverse()
        .map_err(|e| Error::breakdown(format!("inverting Wishart draw: {e}")))
}

/// Conditional law of the unobserved coordinates of `N_q(mu, h)` given the
/// observed ones: returns the conditional mean and covariance of the
/// complement of `observed_idx`, in increasing index order.
pub fn conditional_mvn(
    mu: &DVector<f64>,
    h: &SpdMatrix,
    observed_idx: &[usize],
    y_obs: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let q = mu.len();
    if h.dim() != q {
        return Err(Error::Dim(format!("mean length {q}, covariance dim {}", h.dim())));
    }
    if observed_idx.len() != y_obs.len() {
        return Err(Error::Dim(format!(
            "{} observed indices but {} observed values",
            observed_idx.len(),
            y_obs.len()
        )));
    }
    let mut is_obs = vec![false; q];
    for &i in observed_idx {
        if i >= q || is_obs[i] {
            return Err(Error::Dim(format!("bad or repeated observed index {i}")));
        }
        is_obs[i] = true;
    }
    let missing: Vec<usize> = (0..q).filter(|&i| !is_obs[i]).collect();
    if observed_idx.is_empty() || missing.is_empty() {
        return Err(Error::Dim(
            "observed index set must be a nonempty proper subset".into(),
        ));
    }
    let hm = h.matrix();
    let h_oo = hm.select_rows(observed_idx).select_columns(observed_idx);
    let h_mo = hm.select_rows(&missing).select_columns(observed_idx);
    let h_mm = hm.select_rows(&missing).select_columns(&missing);
    let chol = h_oo.cholesky().ok_or(Error::SingularBlock)?;
    let mu_o = DVector::from_iterator(observed_idx.len(), observed_idx.iter().map(|&i| mu[i]));
    let mu_m = DVector::from_iterator(missing.len(), missing.iter().map(|&i| mu[i]));
    let alpha = chol.solve(&(y_obs - mu_o));
    let mean = mu_m + &h_mo * alpha;
    let cov = h_mm - &h_mo * chol.solve(&h_mo.transpose());
    Ok((mean, cov))
}
