//! Univariate variance-component estimation by maximum likelihood (not REML)
//! in the kinship eigenbasis.
//!
//! After rotation, observation `j` is independent `N(beta x_j, s2 v_j(h))`
//! with `v_j(h) = h r_j + 1 - h`. Both `beta` and `s2` are profiled out, so the
//! search is one-dimensional in `h`: a 100-point grid on `(0, 1)` followed by
//! golden-section refinement inside the best grid bracket.
//!
//! A kinship built from centred genotypes has a null eigenvector along the
//! intercept. There `v_j(1) = 0` while the covariates fit `y_j` exactly, and
//! the plain likelihood grows like `log(1/(1-h))` without bound. Such
//! directions are eliminated first: the covariate combinations living in the
//! null space are fitted there by least squares, and the likelihood is that
//! of the remaining directions given them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::PhenotypeMatrix;
use crate::kinship::SpectralKinship;

const GRID_POINTS: usize = 100;
const H_EDGE: f64 = 1e-7;
const H_TOL: f64 = 1e-8;
const BOUNDARY: f64 = 1e-6;
const CURVATURE_STEP: f64 = 1e-4;
/// Kinship eigenvalues at or below this fraction of the largest count as zero.
const NULL_EIGEN: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct UnivariateFit {
    pub h2: f64,
    pub sigma_g2: f64,
    pub sigma_e2: f64,
    /// NaN when the estimate sits on the boundary or the curvature is not negative.
    pub se_h2: f64,
    /// Excludes null-space directions absorbed by the covariates, if any.
    pub loglik: f64,
    pub beta: Vec<f64>,
    /// The optimum lies within 1e-6 of 0 or 1.
    pub boundary: bool,
}

struct Profile {
    y: DVector<f64>,
    x: DMatrix<f64>,
    r: DVector<f64>,
    /// Maps the profiled coefficients back to the caller's covariates.
    lift: Lift,
}

struct Lift {
    /// Coefficients of the combinations fitted in the null space.
    fixed: DVector<f64>,
    /// `k x m` and `k x (k - m)` orthonormal covariate bases.
    a_fixed: DMatrix<f64>,
    a_free: DMatrix<f64>,
}

impl Lift {
    fn identity(k: usize) -> Self {
        Lift {
            fixed: DVector::zeros(0),
            a_fixed: DMatrix::zeros(k, 0),
            a_free: DMatrix::identity(k, k),
        }
    }

    fn beta(&self, free: &DVector<f64>) -> DVector<f64> {
        &self.a_fixed * &self.fixed + &self.a_free * free
    }
}

struct ProfilePoint {
    loglik: f64,
    /// Derivative of the profiled log-likelihood in `h`.
    score: f64,
    s2: f64,
    beta: DVector<f64>,
}

impl Profile {
    fn eval(&self, h: f64) -> Result<ProfilePoint> {
        let n = self.y.len();
        let w = self.r.map(|r| 1.0 / (h * r + 1.0 - h));
        let k = self.x.nrows();
        let mut xwx = DMatrix::zeros(k, k);
        let mut xwy = DVector::zeros(k);
        for j in 0..n {
            let xj = self.x.column(j);
            xwx += w[j] * xj * xj.transpose();
            xwy += w[j] * self.y[j] * xj;
        }
        let beta = if k == 0 {
            DVector::zeros(0)
        } else {
            xwx.cholesky()
                .ok_or_else(|| Error::breakdown("covariate cross-product is singular"))?
                .solve(&xwy)
        };
        let fitted = self.x.transpose() * &beta;
        let s2 = (0..n).map(|j| w[j] * (self.y[j] - fitted[j]).powi(2)).sum::<f64>() / n as f64;
        let log_v: f64 = w.iter().map(|w| -w.ln()).sum();
        let nf = n as f64;
        let loglik = -0.5 * nf * (2.0 * std::f64::consts::PI).ln() - 0.5 * nf * s2.ln() - 0.5 * log_v - 0.5 * nf;
        // envelope theorem: beta is at its optimum, so only the weights move
        let score = 0.5
            * (0..n)
                .map(|j| (self.r[j] - 1.0) * w[j] * (w[j] * (self.y[j] - fitted[j]).powi(2) / s2 - 1.0))
                .sum::<f64>();
        Ok(ProfilePoint { loglik, score, s2, beta })
    }

    fn score(&self, h: f64) -> Result<f64> {
        self.eval(h).map(|p| p.score)
    }

    fn loglik(&self, h: f64) -> Result<f64> {
        self.eval(h).map(|p| p.loglik)
    }
}

/// Profiled log-likelihood of `h` for a single complete trait (after the
/// null-space elimination described above).
pub fn profile_loglik(y_row: &[f64], x: &DMatrix<f64>, sk: &SpectralKinship, h: f64) -> Result<f64> {
    profile(y_row, x, sk)?.loglik(h)
}

fn profile(y_row: &[f64], x: &DMatrix<f64>, sk: &SpectralKinship) -> Result<Profile> {
    let n = sk.n();
    if y_row.len() != n || x.ncols() != n {
        return Err(Error::Dim(format!(
            "trait of length {}, {} covariate columns, kinship of size {n}",
            y_row.len(),
            x.ncols()
        )));
    }
    let missing = y_row.iter().filter(|v| v.is_nan()).count();
    if missing > 0 {
        return Err(Error::MissingData(missing));
    }
    let u = sk.eigvecs();
    let y = u.transpose() * DVector::from_column_slice(y_row);
    let xt = x * u;
    let r = sk.eigvals().clone();
    let k = x.nrows();
    let tol = NULL_EIGEN * r.max().max(0.0);
    let (null, pos): (Vec<usize>, Vec<usize>) = (0..n).partition(|&j| r[j] <= tol);
    if null.is_empty() || k == 0 {
        return Ok(Profile { y, x: xt, r, lift: Lift::identity(k) });
    }
    let xn = xt.select_columns(&null);
    let eig = (&xn * xn.transpose()).symmetric_eigen();
    let scale = eig.eigenvalues.max().max(0.0);
    let (fixed_idx, free_idx): (Vec<usize>, Vec<usize>) =
        (0..k).partition(|&i| eig.eigenvalues[i] > NULL_EIGEN * scale && scale > 0.0);
    if fixed_idx.is_empty() {
        return Ok(Profile { y, x: xt, r, lift: Lift::identity(k) });
    }
    let a_fixed = eig.eigenvectors.select_columns(&fixed_idx);
    let a_free = eig.eigenvectors.select_columns(&free_idx);
    let m = fixed_idx.len();

    let x1n = a_fixed.transpose() * &xn;
    let yn = y.select_rows(&null);
    let gram = &x1n * x1n.transpose();
    let fixed = gram
        .cholesky()
        .ok_or_else(|| Error::breakdown("null-space covariate block is singular"))?
        .solve(&(&x1n * &yn));
    let rss_null = (&yn - x1n.transpose() * &fixed).norm_squared();

    // null directions beyond the fitted ones all have variance s2 (1 - h) and
    // no covariate loading, so only their pooled residual matters
    let extra = null.len() - m;
    let len = pos.len() + extra;
    let x1p = a_fixed.transpose() * xt.select_columns(&pos);
    let yp = y.select_rows(&pos) - x1p.transpose() * &fixed;
    let x2p = a_free.transpose() * xt.select_columns(&pos);
    let mut y_red = DVector::zeros(len);
    let mut x_red = DMatrix::zeros(k - m, len);
    let mut r_red = DVector::zeros(len);
    y_red.rows_mut(0, pos.len()).copy_from(&yp);
    x_red.columns_mut(0, pos.len()).copy_from(&x2p);
    r_red.rows_mut(0, pos.len()).copy_from(&r.select_rows(&pos));
    if extra > 0 {
        y_red[pos.len()] = rss_null.sqrt();
    }
    Ok(Profile {
        y: y_red,
        x: x_red,
        r: r_red,
        lift: Lift { fixed, a_fixed, a_free },
    })
}

fn golden(f: impl Fn(f64) -> Result<f64>, mut a: f64, mut b: f64) -> Result<f64> {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > H_TOL {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
    }
    Ok(0.5 * (a + b))
}

/// Golden section stalls once likelihood differences fall to rounding level,
/// about 1e-6 from the optimum here. Bisecting the score from there pins the
/// root to rounding level in `h` instead.
fn polish(prof: &Profile, h: f64, lo: f64, hi: f64) -> Result<f64> {
    let mut a = (h - 1e-4).max(lo);
    let mut b = (h + 1e-4).min(hi);
    if !(prof.score(a)? > 0.0 && prof.score(b)? < 0.0) {
        return Ok(h);
    }
    for _ in 0..100 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if prof.score(m)? > 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Maximum-likelihood fit of `y = beta x + g + e`, `g ~ N(0, sigma_g2 K)`,
/// `e ~ N(0, sigma_e2 I)` for one complete trait.
pub fn univariate_ml(y_row: &[f64], x: &DMatrix<f64>, sk: &SpectralKinship) -> Result<UnivariateFit> {
    let prof = profile(y_row, x, sk)?;
    let r = &prof.r;
    let (rmin, rmax) = (r.min(), r.max());
    if rmax - rmin <= 1e-8 * rmax.abs().max(1.0) {
        return Err(Error::NonIdentifiable);
    }
    let grid: Vec<f64> = (0..GRID_POINTS)
        .map(|i| H_EDGE + (1.0 - 2.0 * H_EDGE) * i as f64 / (GRID_POINTS - 1) as f64)
        .collect();
    let values = grid.iter().map(|&h| prof.loglik(h)).collect::<Result<Vec<_>>>()?;
    let (best, _) = values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(GRID_POINTS - 1)];
    let h = golden(|h| prof.loglik(h), lo, hi)?;
    let h = polish(&prof, h, lo, hi)?;
    let at = prof.eval(h)?;

    let boundary = h < BOUNDARY || h > 1.0 - BOUNDARY;
    let se_h2 = if boundary {
        f64::NAN
    } else {
        let step = CURVATURE_STEP.min(0.5 * h).min(0.5 * (1.0 - h));
        let curv = (prof.score(h + step)? - prof.score(h - step)?) / (2.0 * step);
        if curv < 0.0 {
            (-1.0 / curv).sqrt()
        } else {
            f64::NAN
        }
    };
    if boundary {
        log::debug!("univariate ML estimate on the boundary (h2 = {h:e})");
    }
    Ok(UnivariateFit {
        h2: h,
        sigma_g2: h * at.s2,
        sigma_e2: (1.0 - h) * at.s2,
        se_h2,
        loglik: at.loglik,
        beta: prof.lift.beta(&at.beta).iter().copied().collect(),
        boundary,
    })
}

/// Fits every trait separately, restricting each to the samples where it is
/// observed (the kinship is re-decomposed for that subset when needed).
pub fn univariate_ml_all(y: &PhenotypeMatrix, x: &DMatrix<f64>, sk: &SpectralKinship) -> Vec<Result<UnivariateFit>> {
    (0..y.n_traits())
        .into_par_iter()
        .map(|i| {
            let observed: Vec<usize> = (0..y.n_samples()).filter(|&j| !y.missing_mask[(i, j)]).collect();
            let row: Vec<f64> = observed.iter().map(|&j| y.values[(i, j)]).collect();
            if observed.len() == y.n_samples() {
                return univariate_ml(&row, x, sk);
            }
            let sub = sk.subset(&observed)?;
            let xs = x.select_columns(&observed);
            univariate_ml(&row, &xs, &sub)
        })
        .collect()
}
