//! Best linear unbiased prediction of missing phenotypes and cross-validation.
//!
//! With `vec(Y) ~ N(mu, H)`, `H = K (x) Sigma + I (x) Sigma_e`, the missing
//! entries are predicted by their conditional mean given the observed ones.
//! The structured path works with the precision `Q = H^{-1}`, which the
//! kinship eigenbasis block-diagonalizes:
//! `Q = (U (x) I) blockdiag((r_l Sigma + Sigma_e)^{-1}) (U^t (x) I)`.
//! Then `E[y_m | y_o] = mu_m - Q_mm^{-1} Q_mo (y_o - mu_o)`, which needs a
//! solve in the (usually small) missing block only.
//!
//! Vectorization stacks the columns of the `d x n` phenotype matrix, so entry
//! `(trait a, sample i)` sits at `i d + a`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gibbs::{run_chains, GibbsConfig};
use crate::ingest::PhenotypeMatrix;
use crate::kinship::SpectralKinship;
use crate::matstats::{conditional_mvn, kron, SpdMatrix};
use crate::reml::univariate_ml_all;

/// Above this many missing entries the missing-block system is solved by
/// conjugate gradients instead of a dense factorization.
const DIRECT_SOLVE_LIMIT: usize = 4000;
/// Largest `n d` for which the dense covariance may be formed.
pub const DENSE_LIMIT: usize = 20_000;
const CG_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct BlupModel {
    sigma_g: SpdMatrix,
    sigma_e: SpdMatrix,
    beta: DMatrix<f64>,
    x: DMatrix<f64>,
    sk: SpectralKinship,
    /// `(r_l Sigma + Sigma_e)^{-1}` per eigenvalue.
    block_inv: Vec<DMatrix<f64>>,
}

impl BlupModel {
    /// Checks dimensions and that every eigen-block `r_l Sigma + Sigma_e` is
    /// SPD, which is equivalent to `H` being SPD.
    pub fn new(
        sigma_g: SpdMatrix,
        sigma_e: SpdMatrix,
        beta: DMatrix<f64>,
        x: DMatrix<f64>,
        sk: SpectralKinship,
    ) -> Result<Self> {
        let d = sigma_g.dim();
        let n = sk.n();
        if sigma_e.dim() != d || beta.nrows() != d || beta.ncols() != x.nrows() || x.ncols() != n {
            return Err(Error::Dim(format!(
                "Sigma {d}x{d}, Sigma_e {0}x{0}, beta {1}x{2}, X {3}x{4}, n = {n}",
                sigma_e.dim(),
                beta.nrows(),
                beta.ncols(),
                x.nrows(),
                x.ncols()
            )));
        }
        let block_inv = sk
            .eigvals()
            .iter()
            .map(|&r| {
                SpdMatrix::new(sigma_g.matrix() * r + sigma_e.matrix())
                    .and_then(|b| b.inverse())
                    .map(SpdMatrix::into_matrix)
                    .map_err(|_| Error::NotSpd(format!("H block for kinship eigenvalue {r:e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BlupModel {
            sigma_g,
            sigma_e,
            beta,
            x,
            sk,
            block_inv,
        })
    }

    pub fn sigma_g(&self) -> &SpdMatrix {
        &self.sigma_g
    }

    pub fn sigma_e(&self) -> &SpdMatrix {
        &self.sigma_e
    }

    pub fn beta(&self) -> &DMatrix<f64> {
        &self.beta
    }

    pub fn kinship(&self) -> &SpectralKinship {
        &self.sk
    }

    pub fn n_traits(&self) -> usize {
        self.sigma_g.dim()
    }

    /// `beta X`, the `d x n` mean.
    pub fn mean(&self) -> DMatrix<f64> {
        &self.beta * &self.x
    }

    /// Dense `H = K (x) Sigma + I (x) Sigma_e`.
    pub fn dense_covariance(&self) -> Result<DMatrix<f64>> {
        let nd = self.sk.n() * self.n_traits();
        if nd > DENSE_LIMIT {
            return Err(Error::Dim(format!("dense covariance of size {nd} exceeds {DENSE_LIMIT}")));
        }
        let n = self.sk.n();
        Ok(kron(self.sk.matrix(), self.sigma_g.matrix()) + kron(&DMatrix::identity(n, n), self.sigma_e.matrix()))
    }

    /// `Q v` for `v` given as a `d x n` matrix.
    fn precision_apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let u = self.sk.eigvecs();
        let mut m = v * u;
        for (l, b) in self.block_inv.iter().enumerate() {
            let col = b * m.column(l);
            m.set_column(l, &col);
        }
        m * u.transpose()
    }
}

fn check_samples(model: &BlupModel, y: &PhenotypeMatrix) -> Result<()> {
    if y.n_traits() != model.n_traits() || y.n_samples() != model.sk.n() {
        return Err(Error::Dim(format!(
            "phenotypes {}x{}, model for {} traits and {} samples",
            y.n_traits(),
            y.n_samples(),
            model.n_traits(),
            model.sk.n()
        )));
    }
    if y.sample_ids != model.sk.sample_ids() {
        return Err(Error::SampleMismatch("phenotype and kinship sample orders differ".into()));
    }
    Ok(())
}

/// Missing and observed positions in vec order.
fn split(y: &PhenotypeMatrix) -> (Vec<(usize, usize)>, usize) {
    let mut missing = Vec::new();
    let mut observed = 0;
    for j in 0..y.n_samples() {
        for a in 0..y.n_traits() {
            if y.missing_mask[(a, j)] {
                missing.push((a, j));
            } else {
                observed += 1;
            }
        }
    }
    (missing, observed)
}

/// Conditional mean of the masked entries given the observed ones. Returns a
/// full `d x n` matrix: observed entries are copied, masked entries predicted.
pub fn blup_predict(model: &BlupModel, y: &PhenotypeMatrix) -> Result<DMatrix<f64>> {
    check_samples(model, y)?;
    let (missing, n_observed) = split(y);
    if missing.is_empty() {
        return Ok(y.values.clone());
    }
    if n_observed == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mu = model.mean();
    let mut resid = &y.values - &mu;
    for &(a, j) in &missing {
        resid[(a, j)] = 0.0;
    }
    let q_r = model.precision_apply(&resid);
    let rhs = DVector::from_iterator(missing.len(), missing.iter().map(|&(a, j)| q_r[(a, j)]));
    let delta = if missing.len() <= DIRECT_SOLVE_LIMIT {
        missing_block(model, &missing)
            .cholesky()
            .ok_or(Error::SingularBlock)?
            .solve(&rhs)
    } else {
        conjugate_gradient(model, &missing, &rhs, y.n_traits(), y.n_samples())?
    };
    let mut out = y.values.clone();
    for (k, &(a, j)) in missing.iter().enumerate() {
        out[(a, j)] = mu[(a, j)] - delta[k];
    }
    Ok(out)
}

/// `Q_mm` with entries `sum_l U_il U_jl [D_l^{-1}]_ab`, built trait pair by
/// trait pair as `U_{I_a} diag(c_ab) U_{I_b}^t`.
fn missing_block(model: &BlupModel, missing: &[(usize, usize)]) -> DMatrix<f64> {
    let d = model.n_traits();
    let u = model.sk.eigvecs();
    let n = u.ncols();
    let by_trait: Vec<Vec<usize>> = (0..d)
        .map(|a| (0..missing.len()).filter(|&k| missing[k].0 == a).collect())
        .collect();
    let mut q = DMatrix::zeros(missing.len(), missing.len());
    for a in 0..d {
        if by_trait[a].is_empty() {
            continue;
        }
        let rows_a: Vec<usize> = by_trait[a].iter().map(|&k| missing[k].1).collect();
        let ua = u.select_rows(&rows_a);
        for b in a..d {
            if by_trait[b].is_empty() {
                continue;
            }
            let rows_b: Vec<usize> = by_trait[b].iter().map(|&k| missing[k].1).collect();
            let c = DVector::from_iterator(n, model.block_inv.iter().map(|m| m[(a, b)]));
            let mut scaled = ua.clone();
            for (l, cl) in c.iter().enumerate() {
                scaled.column_mut(l).scale_mut(*cl);
            }
            let blk = scaled * u.select_rows(&rows_b).transpose();
            for (p, &ka) in by_trait[a].iter().enumerate() {
                for (r, &kb) in by_trait[b].iter().enumerate() {
                    q[(ka, kb)] = blk[(p, r)];
                    q[(kb, ka)] = blk[(p, r)];
                }
            }
        }
    }
    q
}

fn conjugate_gradient(
    model: &BlupModel,
    missing: &[(usize, usize)],
    rhs: &DVector<f64>,
    d: usize,
    n: usize,
) -> Result<DVector<f64>> {
    let apply = |v: &DVector<f64>| {
        let mut full = DMatrix::zeros(d, n);
        for (k, &(a, j)) in missing.iter().enumerate() {
            full[(a, j)] = v[k];
        }
        let qv = model.precision_apply(&full);
        DVector::from_iterator(missing.len(), missing.iter().map(|&(a, j)| qv[(a, j)]))
    };
    let mut x = DVector::zeros(rhs.len());
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    let target = CG_TOL * CG_TOL * rhs.dot(rhs).max(f64::MIN_POSITIVE);
    for _ in 0..(10 * rhs.len()).max(100) {
        if rr <= target {
            return Ok(x);
        }
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            return Err(Error::SingularBlock);
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rr_new = r.dot(&r);
        p = &r + &p * (rr_new / rr);
        rr = rr_new;
    }
    Err(Error::breakdown("conjugate gradients did not converge on the missing block"))
}

/// Reference implementation through the dense `nd x nd` covariance.
pub fn blup_predict_dense(model: &BlupModel, y: &PhenotypeMatrix) -> Result<DMatrix<f64>> {
    check_samples(model, y)?;
    let (missing, n_observed) = split(y);
    if missing.is_empty() {
        return Ok(y.values.clone());
    }
    if n_observed == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let d = y.n_traits();
    let h = SpdMatrix::new(model.dense_covariance()?)?;
    let mu = crate::matstats::vec_of(&model.mean());
    let vec_y = crate::matstats::vec_of(&y.values);
    let observed: Vec<usize> = (0..vec_y.len()).filter(|&k| !y.missing_mask[(k % d, k / d)]).collect();
    let y_obs = DVector::from_iterator(observed.len(), observed.iter().map(|&k| vec_y[k]));
    let (mean, _) = conditional_mvn(&mu, &h, &observed, &y_obs)?;
    let mut out = y.values.clone();
    let mut sorted = missing.clone();
    sorted.sort_by_key(|&(a, j)| j * d + a);
    for (k, &(a, j)) in sorted.iter().enumerate() {
        out[(a, j)] = mean[k];
    }
    Ok(out)
}

/// Fills masked entries with their predictions, clears the mask and flags
/// the filled entries as imputed.
pub fn impute_phenotypes(model: &BlupModel, y: &PhenotypeMatrix) -> Result<PhenotypeMatrix> {
    let filled = blup_predict(model, y)?;
    let mut out = y.clone();
    out.values = filled;
    for (imp, miss) in out.imputed.iter_mut().zip(y.missing_mask.iter()) {
        *imp = *imp || *miss;
    }
    out.missing_mask.fill(false);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMetrics {
    pub rmse: Vec<f64>,
    /// Pearson correlation; NaN when either side has zero variance.
    pub corr: Vec<f64>,
    pub corr_undefined: Vec<bool>,
}

/// Per-trait root mean squared error and Pearson correlation between
/// columns of `d x m` matrices.
pub fn rmse_and_corr(y_true: &DMatrix<f64>, y_pred: &DMatrix<f64>) -> Result<PredictionMetrics> {
    if y_true.shape() != y_pred.shape() {
        return Err(Error::Dim(format!("{:?} truth vs {:?} predictions", y_true.shape(), y_pred.shape())));
    }
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..y_true.nrows())
        .map(|i| (y_true.row(i).iter().copied().collect(), y_pred.row(i).iter().copied().collect()))
        .collect();
    metrics_from_pairs(&rows)
}

fn metrics_from_pairs(rows: &[(Vec<f64>, Vec<f64>)]) -> Result<PredictionMetrics> {
    let mut out = PredictionMetrics {
        rmse: Vec::new(),
        corr: Vec::new(),
        corr_undefined: Vec::new(),
    };
    for (t, p) in rows {
        let m = t.len();
        if m < 2 {
            return Err(Error::InsufficientData { needed: 2, got: m });
        }
        let mf = m as f64;
        out.rmse.push((t.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / mf).sqrt());
        let mt = t.iter().sum::<f64>() / mf;
        let mp = p.iter().sum::<f64>() / mf;
        let (mut stt, mut spp, mut stp) = (0.0, 0.0, 0.0);
        for (a, b) in t.iter().zip(p) {
            stt += (a - mt) * (a - mt);
            spp += (b - mp) * (b - mp);
            stp += (a - mt) * (b - mp);
        }
        let undefined = !(stt > 0.0 && spp > 0.0);
        out.corr.push(if undefined { f64::NAN } else { (stp / (stt * spp).sqrt()).clamp(-1.0, 1.0) });
        out.corr_undefined.push(undefined);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Posterior means from the Gibbs sampler.
    Bayes,
    /// Per-trait univariate ML; diagonal covariances.
    Reml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImputePolicy {
    /// Discard individuals with any missing trait before anything else.
    Drop,
    /// Keep everyone; training phenotypes are BLUP-imputed from a preliminary
    /// fit on the complete training individuals, then the model is refit.
    Blup,
}

#[derive(Debug, Clone)]
pub struct CvConfig {
    pub folds: usize,
    pub estimator: Estimator,
    pub impute: ImputePolicy,
    pub seed: u64,
    /// Used by the Bayes estimator; fold `f` runs with seed `gibbs.seed + f`.
    pub gibbs: GibbsConfig,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub trait_ids: Vec<String>,
    pub rmse: Vec<f64>,
    pub corr: Vec<f64>,
    pub corr_undefined: Vec<bool>,
    /// Fold per individual; `None` for individuals removed by the drop policy.
    pub fold_of: Vec<Option<usize>>,
    pub n_train: Vec<usize>,
    pub n_test: Vec<usize>,
    /// Scored (observed, held-out) entries per trait.
    pub n_scored: Vec<usize>,
}

/// Seeded fold assignment, stratified by whether an individual is complete,
/// so each fold gets a matching share of incomplete individuals.
pub fn assign_folds(y: &PhenotypeMatrix, folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let complete = y.complete_samples();
    let mut is_complete = vec![false; y.n_samples()];
    for &j in &complete {
        is_complete[j] = true;
    }
    let mut incomplete: Vec<usize> = (0..y.n_samples()).filter(|&j| !is_complete[j]).collect();
    let mut complete = complete;
    complete.shuffle(&mut rng);
    incomplete.shuffle(&mut rng);
    let mut fold_of = vec![0; y.n_samples()];
    for (pos, &j) in complete.iter().chain(incomplete.iter()).enumerate() {
        fold_of[j] = pos % folds;
    }
    fold_of
}

/// Point estimates `(Sigma, Sigma_e, beta)` from complete phenotypes.
fn fit(
    y: &PhenotypeMatrix,
    x: &DMatrix<f64>,
    sk: &SpectralKinship,
    estimator: Estimator,
    gibbs: &GibbsConfig,
) -> Result<(SpdMatrix, SpdMatrix, DMatrix<f64>)> {
    match estimator {
        Estimator::Bayes => {
            let draws = run_chains(y, x, sk, gibbs)?;
            let m = draws.posterior_means();
            Ok((SpdMatrix::new(m.sigma_g)?, SpdMatrix::new(m.sigma_e)?, m.beta))
        }
        Estimator::Reml => {
            let fits = univariate_ml_all(y, x, sk).into_iter().collect::<Result<Vec<_>>>()?;
            // a zero variance component would make H singular; keep a floor
            let floor = |v: f64, total: f64| v.max(1e-8 * total);
            let g: Vec<f64> = fits.iter().map(|f| floor(f.sigma_g2, f.sigma_g2 + f.sigma_e2)).collect();
            let e: Vec<f64> = fits.iter().map(|f| floor(f.sigma_e2, f.sigma_g2 + f.sigma_e2)).collect();
            let beta = DMatrix::from_fn(fits.len(), x.nrows(), |i, l| fits[i].beta[l]);
            Ok((SpdMatrix::from_diagonal(&g)?, SpdMatrix::from_diagonal(&e)?, beta))
        }
    }
}

struct FoldResult {
    // (trait, observed value, prediction)
    scored: Vec<(usize, f64, f64)>,
    n_train: usize,
    n_test: usize,
}

fn run_fold(
    y: &PhenotypeMatrix,
    x: &DMatrix<f64>,
    sk: &SpectralKinship,
    fold_of: &[usize],
    fold: usize,
    config: &CvConfig,
) -> Result<FoldResult> {
    let n = y.n_samples();
    let train: Vec<usize> = (0..n).filter(|&j| fold_of[j] != fold).collect();
    let test: Vec<usize> = (0..n).filter(|&j| fold_of[j] == fold).collect();
    let observed_in = |set: &[usize]| set.iter().any(|&j| y.missing_mask.column(j).iter().any(|m| !m));
    if test.is_empty() || train.is_empty() || !observed_in(&test) || !observed_in(&train) {
        return Err(Error::DegenerateFold(fold));
    }
    let mut gibbs = config.gibbs.clone();
    gibbs.seed = gibbs.seed.wrapping_add(fold as u64);

    let y_train = y.select_samples(&train);
    let train_complete: Vec<usize> = y_train.complete_samples();
    if train_complete.len() < 2 {
        return Err(Error::DegenerateFold(fold));
    }
    let sk_train = sk.subset(&train)?;
    let x_train = x.select_columns(&train);
    let (sg, se, beta) = {
        let y_c = y_train.select_samples(&train_complete);
        let sk_c = sk_train.subset(&train_complete)?;
        let x_c = x_train.select_columns(&train_complete);
        let prelim = fit(&y_c, &x_c, &sk_c, config.estimator, &gibbs)?;
        if config.impute == ImputePolicy::Blup && train_complete.len() < train.len() {
            let model = BlupModel::new(prelim.0, prelim.1, prelim.2, x_train.clone(), sk_train.clone())?;
            let y_imp = impute_phenotypes(&model, &y_train)?;
            fit(&y_imp, &x_train, &sk_train, config.estimator, &gibbs)?
        } else {
            prelim
        }
    };

    // predict the held-out individuals from the training individuals' observed values
    let mut all = train.clone();
    all.extend_from_slice(&test);
    all.sort_unstable();
    let sk_all = sk.subset(&all)?;
    let mut y_all = y.select_samples(&all);
    let mut is_test = vec![false; all.len()];
    for (pos, j) in all.iter().enumerate() {
        if fold_of[*j] == fold {
            is_test[pos] = true;
            for a in 0..y.n_traits() {
                y_all.values[(a, pos)] = f64::NAN;
                y_all.missing_mask[(a, pos)] = true;
            }
        }
    }
    let model = BlupModel::new(sg, se, beta, x.select_columns(&all), sk_all)?;
    let pred = blup_predict(&model, &y_all)?;
    let mut scored = Vec::new();
    for (pos, &j) in all.iter().enumerate() {
        if !is_test[pos] {
            continue;
        }
        for a in 0..y.n_traits() {
            if !y.missing_mask[(a, j)] {
                scored.push((a, y.values[(a, j)], pred[(a, pos)]));
            }
        }
    }
    Ok(FoldResult {
        scored,
        n_train: train.len(),
        n_test: test.len(),
    })
}

/// K-fold cross-validation of BLUP predictions. Each fold is fit on its
/// training individuals only; held-out individuals have all their traits
/// masked and are predicted from the training phenotypes through the kinship.
/// Scores pool every originally observed held-out entry across folds.
pub fn cross_validate(
    y: &PhenotypeMatrix,
    x: &DMatrix<f64>,
    sk: &SpectralKinship,
    config: &CvConfig,
) -> Result<CvReport> {
    if config.folds < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {}", config.folds)));
    }
    if y.sample_ids != sk.sample_ids() || x.ncols() != y.n_samples() {
        return Err(Error::SampleMismatch("phenotype, covariate and kinship samples differ".into()));
    }
    let n_input = y.n_samples();
    let (y, x, sk, kept) = match config.impute {
        ImputePolicy::Drop => {
            let keep = y.complete_samples();
            (y.select_samples(&keep), x.select_columns(&keep), sk.subset(&keep)?, keep)
        }
        ImputePolicy::Blup => (y.clone(), x.clone(), sk.clone(), (0..y.n_samples()).collect()),
    };
    if y.n_samples() < config.folds {
        return Err(Error::InsufficientData {
            needed: config.folds,
            got: y.n_samples(),
        });
    }
    let folds = assign_folds(&y, config.folds, config.seed);
    let results = (0..config.folds)
        .into_par_iter()
        .map(|f| run_fold(&y, &x, &sk, &folds, f, config))
        .collect::<Result<Vec<_>>>()?;

    let d = y.n_traits();
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); d];
    for r in &results {
        for &(a, t, p) in &r.scored {
            pairs[a].0.push(t);
            pairs[a].1.push(p);
        }
    }
    let metrics = metrics_from_pairs(&pairs)?;
    let mut fold_of = vec![None; n_input];
    for (pos, &j) in kept.iter().enumerate() {
        fold_of[j] = Some(folds[pos]);
    }
    Ok(CvReport {
        trait_ids: y.trait_ids.clone(),
        rmse: metrics.rmse,
        corr: metrics.corr,
        corr_undefined: metrics.corr_undefined,
        fold_of,
        n_train: results.iter().map(|r| r.n_train).collect(),
        n_test: results.iter().map(|r| r.n_test).collect(),
        n_scored: pairs.iter().map(|p| p.0.len()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::intercept;
    use crate::matstats::standard_normal_matrix;
    use crate::simulate::{covariances_from_h2, simulate_phenotypes};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn random_model(n: usize, rng: &mut ChaCha20Rng) -> BlupModel {
        let z = standard_normal_matrix(n + 3, n, rng);
        let sk = SpectralKinship::from_matrix(z.transpose() * &z / (n + 3) as f64, ids(n)).unwrap();
        let a = standard_normal_matrix(2, 2, rng);
        let sg = SpdMatrix::new(&a * a.transpose() + DMatrix::identity(2, 2) * 0.2).unwrap();
        let b = standard_normal_matrix(2, 2, rng);
        let se = SpdMatrix::new(&b * b.transpose() + DMatrix::identity(2, 2) * 0.1).unwrap();
        let beta = standard_normal_matrix(2, 1, rng);
        BlupModel::new(sg, se, beta, intercept(n), sk).unwrap()
    }

    fn masked(values: DMatrix<f64>, mask: impl Fn(usize, usize) -> bool) -> PhenotypeMatrix {
        let (d, n) = values.shape();
        let v = DMatrix::from_fn(d, n, |a, j| if mask(a, j) { f64::NAN } else { values[(a, j)] });
        PhenotypeMatrix::new(v, (0..d).map(|a| format!("t{a}")).collect(), ids(n)).unwrap()
    }

    #[test]
    fn unrelated_missing_individual_gets_mean() {
        let sk = SpectralKinship::identity(ids(3));
        let sg = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0])).unwrap();
        let model = BlupModel::new(sg, SpdMatrix::identity(2), DMatrix::zeros(2, 1), intercept(3), sk).unwrap();
        let y = masked(DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 0.0]), |_, j| j == 2);
        let pred = blup_predict(&model, &y).unwrap();
        assert!(pred[(0, 2)].abs() < 1e-14 && pred[(1, 2)].abs() < 1e-14);
        assert_eq!(pred[(0, 0)], 1.0);
    }

    #[test]
    fn within_individual_regression() {
        let sk = SpectralKinship::identity(ids(2));
        let sg = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 2.0])).unwrap();
        let se = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4])).unwrap();
        let model = BlupModel::new(sg, se, DMatrix::zeros(2, 1), intercept(2), sk).unwrap();
        let y = masked(DMatrix::from_row_slice(2, 2, &[1.3, 0.2, 9.0, 0.4]), |a, j| a == 1 && j == 0);
        let pred = blup_predict(&model, &y).unwrap();
        assert!((pred[(1, 0)] - 0.7 / 1.5 * 1.3).abs() < 1e-12);
    }

    #[test]
    fn structured_matches_dense_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let model = random_model(4, &mut rng);
        let values = standard_normal_matrix(2, 4, &mut rng);
        let y = masked(values, |a, j| (a + j) % 3 == 0);
        let fast = blup_predict(&model, &y).unwrap();
        let dense = blup_predict_dense(&model, &y).unwrap();
        assert!((fast - dense).amax() < 1e-8);
    }

    #[test]
    fn conjugate_gradient_matches_direct() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let model = random_model(30, &mut rng);
        let y = masked(standard_normal_matrix(2, 30, &mut rng), |a, j| (3 * j + a) % 4 == 0);
        let (missing, _) = split(&y);
        let rhs = DVector::from_fn(missing.len(), |k, _| k as f64 - 3.0);
        let direct = missing_block(&model, &missing).cholesky().unwrap().solve(&rhs);
        let cg = conjugate_gradient(&model, &missing, &rhs, 2, 30).unwrap();
        assert!((direct - cg).amax() < 1e-8);
    }

    #[test]
    fn nothing_missing_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let model = random_model(5, &mut rng);
        let y = masked(standard_normal_matrix(2, 5, &mut rng), |_, _| false);
        assert_eq!(blup_predict(&model, &y).unwrap(), y.values);
    }

    #[test]
    fn imputation_sets_flags() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let model = random_model(5, &mut rng);
        let y = masked(standard_normal_matrix(2, 5, &mut rng), |a, j| a == 0 && j < 2);
        let out = impute_phenotypes(&model, &y).unwrap();
        assert_eq!(out.n_missing(), 0);
        assert!(out.imputed[(0, 0)] && out.imputed[(0, 1)] && !out.imputed[(1, 0)]);
        assert!(out.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn metric_examples() {
        let t = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 5.0]);
        let same = rmse_and_corr(&t, &t).unwrap();
        assert_eq!((same.rmse[0], same.corr[0]), (0.0, 1.0));
        let shifted = rmse_and_corr(&t, &t.add_scalar(2.5)).unwrap();
        assert!((shifted.rmse[0] - 2.5).abs() < 1e-12 && (shifted.corr[0] - 1.0).abs() < 1e-12);
        let resid = rmse_and_corr(&t, &(&t + DMatrix::from_row_slice(1, 4, &[1.0, -1.0, 1.0, -1.0]))).unwrap();
        assert!((resid.rmse[0] - 1.0).abs() < 1e-12);
        let flat = rmse_and_corr(&t, &DMatrix::from_element(1, 4, 2.0)).unwrap();
        assert!(flat.corr[0].is_nan() && flat.corr_undefined[0]);
        assert!(matches!(
            rmse_and_corr(&DMatrix::zeros(1, 1), &DMatrix::zeros(1, 1)),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn folds_are_stratified_and_seeded() {
        let v = DMatrix::from_fn(2, 40, |a, j| if a == 1 && j % 4 == 0 { f64::NAN } else { 1.0 });
        let y = PhenotypeMatrix::new(v, vec!["a".into(), "b".into()], ids(40)).unwrap();
        let f = assign_folds(&y, 5, 11);
        assert_eq!(f, assign_folds(&y, 5, 11));
        for fold in 0..5 {
            let members: Vec<usize> = (0..40).filter(|&j| f[j] == fold).collect();
            assert_eq!(members.len(), 8);
            assert_eq!(members.iter().filter(|&&j| j % 4 == 0).count(), 2);
        }
    }

    #[test]
    fn reml_cross_validation_tracks_heritability() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 400;
        let geno = crate::simulate::simulate_genotypes(n, 300, (0.05, 0.5), &mut rng).unwrap();
        let z = crate::ingest::standardize(&geno.genotypes).unwrap();
        let sk = crate::kinship::compute_kinship(&z).unwrap();
        let (sg, se) = covariances_from_h2(&[0.8, 0.8], 0.0).unwrap();
        let y = simulate_phenotypes(&sk, &sg, &se, &DMatrix::zeros(2, 1), &intercept(n), &mut rng).unwrap();
        let config = CvConfig {
            folds: 5,
            estimator: Estimator::Reml,
            impute: ImputePolicy::Drop,
            seed: 1,
            gibbs: GibbsConfig::default(),
        };
        let report = cross_validate(&y, &intercept(n), &sk, &config).unwrap();
        for c in &report.corr {
            assert!(*c > 0.5 && *c < 0.8f64.sqrt() + 0.05, "{report:?}");
        }
        assert_eq!(report.n_test.iter().sum::<usize>(), n);
        assert!(report.rmse.iter().all(|r| *r >= 0.0));
    }
}
