//! Conjugate Gibbs sampler for the spectrally rotated model.
//!
//! After rotating by the kinship eigenvectors `U`, column `j` of the data
//! satisfies
//!
//! ```text
//! y_j = beta x_j + sqrt(r_j) zeta_j + eps_j,
//! zeta_j ~ N_d(0, Sigma),  eps_j ~ N_d(0, Sigma_e)
//! ```
//!
//! independently over `j`. Priors: `Sigma^{-1} ~ W(V, nu)`,
//! `Sigma_e^{-1} ~ W(V, nu)` and `vec(beta) ~ N(0, tau I)`. Every block has a
//! closed-form full conditional; see `docs/gibbs_conditionals.md`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::ingest::PhenotypeMatrix;
use crate::kinship::SpectralKinship;
use crate::matstats::{kron, sample_wishart, SpdMatrix, WishartPrior};

pub const DRAWS_META_FILE: &str = "draws.meta";
pub const MIN_KEPT_DRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum WishartScaleMode {
    Identity,
    UserMatrix(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GibbsConfig {
    pub n_chains: usize,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub wishart_scale_mode: WishartScaleMode,
    /// Defaults to the number of traits.
    pub wishart_dof: Option<f64>,
    /// Prior variance of each regression coefficient.
    pub coef_prior_variance: f64,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            n_chains: 3,
            n_iter: 35_000,
            burn_in: 10_000,
            thin: 5,
            seed: 1,
            wishart_scale_mode: WishartScaleMode::Identity,
            wishart_dof: None,
            coef_prior_variance: 1e4,
        }
    }
}

impl GibbsConfig {
    pub fn kept_per_chain(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }

    /// Whether 1-based iteration `t` is retained.
    pub fn keeps(&self, t: usize) -> bool {
        t > self.burn_in && (t - self.burn_in) % self.thin == 0
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_chains == 0 || self.n_iter == 0 || self.thin == 0 {
            return bad("chains, iterations and thinning must be positive".into());
        }
        if self.burn_in >= self.n_iter {
            return bad(format!("burn-in {} must be below the iteration count {}", self.burn_in, self.n_iter));
        }
        if self.kept_per_chain() < MIN_KEPT_DRAWS {
            return bad(format!(
                "(iter - burnin) / thin = {} kept draws per chain; need at least {MIN_KEPT_DRAWS}",
                self.kept_per_chain()
            ));
        }
        if !(self.coef_prior_variance > 0.0) || !self.coef_prior_variance.is_finite() {
            return bad(format!("coefficient prior variance {} must be positive", self.coef_prior_variance));
        }
        self.prior(d).map(|_| ())
    }

    pub fn prior(&self, d: usize) -> Result<WishartPrior> {
        let scale = match &self.wishart_scale_mode {
            WishartScaleMode::Identity => SpdMatrix::identity(d),
            WishartScaleMode::UserMatrix(m) => {
                if m.nrows() != d {
                    return Err(Error::Dim(format!("Wishart scale is {}x{}, expected {d}x{d}", m.nrows(), m.ncols())));
                }
                SpdMatrix::new(m.clone())?
            }
        };
        WishartPrior::new(scale, self.wishart_dof.unwrap_or(d as f64))
    }
}

/// Current values of every block of the sampler.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub beta: DMatrix<f64>,
    pub zeta: DMatrix<f64>,
    pub sigma_g: SpdMatrix,
    pub sigma_e: SpdMatrix,
}

/// Rotated data `Y U`, `X U` and the kinship eigenvalues.
#[derive(Debug, Clone)]
pub struct TransformedData {
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub eigvals: DVector<f64>,
}

impl TransformedData {
    pub fn n_traits(&self) -> usize {
        self.y.nrows()
    }

    pub fn n(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.nrows()
    }

    fn sqrt_r(&self) -> DVector<f64> {
        self.eigvals.map(f64::sqrt)
    }
}

/// Rotates phenotypes and covariates into the kinship eigenbasis.
pub fn transform_data(y: &PhenotypeMatrix, x: &DMatrix<f64>, sk: &SpectralKinship) -> Result<TransformedData> {
    let n = sk.n();
    if y.n_missing() > 0 {
        return Err(Error::MissingData(y.n_missing()));
    }
    if y.n_samples() != n || x.ncols() != n {
        return Err(Error::Dim(format!(
            "{} phenotyped samples, {} covariate columns, kinship of size {n}",
            y.n_samples(),
            x.ncols()
        )));
    }
    if y.sample_ids != sk.sample_ids() {
        return Err(Error::SampleMismatch("phenotype and kinship sample orders differ".into()));
    }
    let u = sk.eigvecs();
    Ok(TransformedData {
        y: &y.values * u,
        x: x * u,
        eigvals: sk.eigvals().clone(),
    })
}

/// `sum_j log N_d(y_j; beta x_j, r_j Sigma + Sigma_e)` in the rotated basis.
pub fn transformed_loglik(
    data: &TransformedData,
    beta: &DMatrix<f64>,
    sigma_g: &SpdMatrix,
    sigma_e: &SpdMatrix,
) -> Result<f64> {
    let resid = &data.y - beta * &data.x;
    let mut total = 0.0;
    for j in 0..data.n() {
        let cov = SpdMatrix::new(sigma_g.matrix() * data.eigvals[j] + sigma_e.matrix())?;
        total += crate::matstats::mvn_logpdf(&resid.column(j).into_owned(), &DVector::zeros(data.n_traits()), &cov)?;
    }
    Ok(total)
}

/// Prior hyperparameters in the form the updates consume.
#[derive(Debug, Clone)]
pub struct Priors {
    pub wishart: WishartPrior,
    wishart_scale_inv: DMatrix<f64>,
    pub coef_prior_variance: f64,
}

impl Priors {
    pub fn new(wishart: WishartPrior, coef_prior_variance: f64) -> Result<Self> {
        let wishart_scale_inv = wishart.scale().inverse()?.into_matrix();
        Ok(Priors {
            wishart,
            wishart_scale_inv,
            coef_prior_variance,
        })
    }
}

fn breakdown(what: &str, e: impl std::fmt::Display) -> Error {
    Error::breakdown(format!("{what}: {e}"))
}

/// Draws `zeta_j | rest ~ N(V_j sqrt(r_j) Sigma_e^{-1} (y_j - beta x_j), V_j)`
/// with `V_j = (Sigma^{-1} + r_j Sigma_e^{-1})^{-1}`.
pub fn update_zeta<R: Rng + ?Sized>(state: &mut ModelState, data: &TransformedData, rng: &mut R) -> Result<()> {
    let d = data.n_traits();
    let prec_g = state.sigma_g.inverse().map_err(|e| breakdown("inverting Sigma", e))?;
    let prec_e = state.sigma_e.inverse().map_err(|e| breakdown("inverting Sigma_e", e))?;
    let weighted = prec_e.matrix() * (&data.y - &state.beta * &data.x);
    for j in 0..data.n() {
        let r = data.eigvals[j];
        let a = prec_g.matrix() + prec_e.matrix() * r;
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::breakdown(format!("conditional precision of zeta_{j} is not SPD")))?;
        let rhs = weighted.column(j) * r.sqrt();
        let mean = chol.solve(&rhs);
        let z = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
        let noise = chol
            .l_dirty()
            .tr_solve_lower_triangular(&z)
            .expect("Cholesky factor has a positive diagonal");
        state.zeta.set_column(j, &(mean + noise));
    }
    Ok(())
}

/// Draws a covariance whose inverse follows the conjugate Wishart posterior
/// `W((V^{-1} + S)^{-1}, nu + m)` for scatter `S` built from `m` vectors.
fn draw_conjugate_covariance<R: Rng + ?Sized>(
    priors: &Priors,
    scatter: &DMatrix<f64>,
    m: usize,
    rng: &mut R,
) -> Result<SpdMatrix> {
    let d = scatter.nrows();
    let mut post = &priors.wishart_scale_inv + scatter;
    let post_scale = match SpdMatrix::new(post.clone()).and_then(|p| p.inverse()) {
        Ok(s) => s,
        Err(_) => {
            let jitter = 1e-10 * scatter.trace().abs().max(f64::MIN_POSITIVE) / d as f64;
            for i in 0..d {
                post[(i, i)] += jitter;
            }
            SpdMatrix::new(post)
                .and_then(|p| p.inverse())
                .map_err(|e| breakdown("posterior Wishart scale after jitter", e))?
        }
    };
    let prior = WishartPrior::new(post_scale, priors.wishart.dof() + m as f64)?;
    let precision = sample_wishart(&prior, rng)?;
    precision.inverse().map_err(|e| breakdown("inverting precision draw", e))
}

/// Redraws `Sigma` from its conditional given `zeta`.
pub fn update_sigma_g<R: Rng + ?Sized>(state: &mut ModelState, priors: &Priors, rng: &mut R) -> Result<()> {
    let scatter = &state.zeta * state.zeta.transpose();
    state.sigma_g = draw_conjugate_covariance(priors, &scatter, state.zeta.ncols(), rng)?;
    Ok(())
}

/// Residuals `y_j - beta x_j - sqrt(r_j) zeta_j`.
pub fn residuals(state: &ModelState, data: &TransformedData) -> DMatrix<f64> {
    let mut genetic = state.zeta.clone();
    for (mut col, s) in genetic.column_iter_mut().zip(data.sqrt_r().iter()) {
        col *= *s;
    }
    &data.y - &state.beta * &data.x - genetic
}

/// Redraws `Sigma_e` from its conditional given the residuals.
pub fn update_sigma_e<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &TransformedData,
    priors: &Priors,
    rng: &mut R,
) -> Result<()> {
    let e = residuals(state, data);
    let scatter = &e * e.transpose();
    state.sigma_e = draw_conjugate_covariance(priors, &scatter, data.n(), rng)?;
    Ok(())
}

/// Redraws `vec(beta)` from its Gaussian conditional with precision
/// `(X X^T ⊗ Sigma_e^{-1}) + I / tau` on the partial residuals
/// `y_j - sqrt(r_j) zeta_j`.
pub fn update_beta<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &TransformedData,
    coef_prior_variance: f64,
    rng: &mut R,
) -> Result<()> {
    let d = data.n_traits();
    let k = data.n_covariates();
    if k == 0 {
        return Ok(());
    }
    let prec_e = state.sigma_e.inverse().map_err(|e| breakdown("inverting Sigma_e", e))?;
    let mut partial = data.y.clone();
    for (j, s) in data.sqrt_r().iter().enumerate() {
        let z = state.zeta.column(j) * *s;
        let mut col = partial.column_mut(j);
        col -= z;
    }
    let mut precision = kron(&(&data.x * data.x.transpose()), prec_e.matrix());
    for i in 0..d * k {
        precision[(i, i)] += 1.0 / coef_prior_variance;
    }
    let rhs_mat = prec_e.matrix() * partial * data.x.transpose();
    let rhs = DVector::from_column_slice(rhs_mat.as_slice());
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::breakdown("posterior precision of beta is not SPD"))?;
    let mean = chol.solve(&rhs);
    let z = DVector::from_fn(d * k, |_, _| rng.sample(StandardNormal));
    let noise = chol
        .l_dirty()
        .tr_solve_lower_triangular(&z)
        .expect("Cholesky factor has a positive diagonal");
    let draw = mean + noise;
    state.beta = DMatrix::from_column_slice(d, k, draw.as_slice());
    Ok(())
}

/// One systematic scan: `zeta -> Sigma -> Sigma_e -> beta`.
pub fn sweep<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &TransformedData,
    priors: &Priors,
    rng: &mut R,
) -> Result<()> {
    update_zeta(state, data, rng)?;
    update_sigma_g(state, priors, rng)?;
    update_sigma_e(state, data, priors, rng)?;
    update_beta(state, data, priors.coef_prior_variance, rng)
}

/// Starting point: `Sigma = Sigma_e = diag(sample trait variances) / 2`,
/// `beta = 0`, `zeta = 0`.
pub fn initial_state(y: &DMatrix<f64>, k: usize) -> Result<ModelState> {
    let (d, n) = y.shape();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let half_var: Vec<f64> = y
        .row_iter()
        .map(|row| {
            let mean = row.sum() / n as f64;
            0.5 * row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        })
        .collect();
    let start = SpdMatrix::from_diagonal(&half_var)
        .map_err(|_| Error::InvalidConfig("a trait has zero sample variance".into()))?;
    Ok(ModelState {
        beta: DMatrix::zeros(d, k),
        zeta: DMatrix::zeros(d, n),
        sigma_g: start.clone(),
        sigma_e: start,
    })
}

/// A retained draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub sigma_g: DMatrix<f64>,
    pub sigma_e: DMatrix<f64>,
    pub beta: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    /// ChaCha stream id used for this chain (the master seed is shared).
    pub stream: u64,
    /// 1-based iteration numbers of the kept draws.
    pub iterations: Vec<usize>,
    pub draws: Vec<Draw>,
}

/// Retained draws from every chain plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub config: GibbsConfig,
    pub trait_ids: Vec<String>,
    pub n_covariates: usize,
    pub chains: Vec<ChainDraws>,
}

/// Scalar functions of a draw that can be summarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameter {
    SigmaG(usize, usize),
    SigmaE(usize, usize),
    Beta(usize, usize),
    /// `Sigma_ii / (Sigma_ii + Sigma_e,ii)`.
    Heritability(usize),
}

impl Parameter {
    pub fn value(&self, draw: &Draw) -> f64 {
        match *self {
            Parameter::SigmaG(i, j) => draw.sigma_g[(i, j)],
            Parameter::SigmaE(i, j) => draw.sigma_e[(i, j)],
            Parameter::Beta(i, l) => draw.beta[(i, l)],
            Parameter::Heritability(i) => {
                let g = draw.sigma_g[(i, i)];
                g / (g + draw.sigma_e[(i, i)])
            }
        }
    }

    /// Column name, 1-based: `sigma_g_12`, `beta_1_1`, `h_2`.
    pub fn name(&self, d: usize) -> String {
        let pair = |i: usize, j: usize| {
            if d < 10 {
                format!("{}{}", i + 1, j + 1)
            } else {
                format!("{}_{}", i + 1, j + 1)
            }
        };
        match *self {
            Parameter::SigmaG(i, j) => format!("sigma_g_{}", pair(i, j)),
            Parameter::SigmaE(i, j) => format!("sigma_e_{}", pair(i, j)),
            Parameter::Beta(i, l) => format!("beta_{}_{}", i + 1, l + 1),
            Parameter::Heritability(i) => format!("h_{}", i + 1),
        }
    }

    /// Upper-triangle covariance entries of `Sigma` then `Sigma_e`, then
    /// `beta` in column-major order.
    pub fn stored(d: usize, k: usize) -> Vec<Parameter> {
        let mut out = Vec::new();
        for i in 0..d {
            for j in i..d {
                out.push(Parameter::SigmaG(i, j));
            }
        }
        for i in 0..d {
            for j in i..d {
                out.push(Parameter::SigmaE(i, j));
            }
        }
        for l in 0..k {
            for i in 0..d {
                out.push(Parameter::Beta(i, l));
            }
        }
        out
    }

    pub fn covariance_entries(d: usize) -> Vec<Parameter> {
        Parameter::stored(d, 0)
    }
}

impl PosteriorDraws {
    pub fn n_traits(&self) -> usize {
        self.trait_ids.len()
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    /// Per-chain series of a parameter.
    pub fn series(&self, param: Parameter) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.draws.iter().map(|dr| param.value(dr)).collect())
            .collect()
    }

    /// Posterior means of `Sigma`, `Sigma_e` and `beta` pooled over chains.
    pub fn posterior_means(&self) -> Draw {
        let d = self.n_traits();
        let k = self.n_covariates;
        let mut acc = Draw {
            sigma_g: DMatrix::zeros(d, d),
            sigma_e: DMatrix::zeros(d, d),
            beta: DMatrix::zeros(d, k),
        };
        let total = self.total_draws() as f64;
        for dr in self.chains.iter().flat_map(|c| c.draws.iter()) {
            acc.sigma_g += &dr.sigma_g;
            acc.sigma_e += &dr.sigma_e;
            acc.beta += &dr.beta;
        }
        acc.sigma_g /= total;
        acc.sigma_e /= total;
        acc.beta /= total;
        acc
    }
}

/// Runs one chain from `init`, retaining draws per the config.
pub fn run_chain(
    data: &TransformedData,
    init: ModelState,
    priors: &Priors,
    config: &GibbsConfig,
    chain: usize,
) -> Result<ChainDraws> {
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(chain as u64);
    let mut state = init;
    let mut out = ChainDraws {
        stream: chain as u64,
        iterations: Vec::with_capacity(config.kept_per_chain()),
        draws: Vec::with_capacity(config.kept_per_chain()),
    };
    for t in 1..=config.n_iter {
        sweep(&mut state, data, priors, &mut rng).map_err(|e| match e {
            Error::NumericalBreakdown { detail, .. } => Error::NumericalBreakdown {
                chain: Some(chain),
                iteration: Some(t),
                detail,
            },
            other => other,
        })?;
        if config.keeps(t) {
            out.iterations.push(t);
            out.draws.push(Draw {
                sigma_g: state.sigma_g.matrix().clone(),
                sigma_e: state.sigma_e.matrix().clone(),
                beta: state.beta.clone(),
            });
        }
    }
    Ok(out)
}

/// Runs `config.n_chains` independent chains. Chain `c` uses the ChaCha20
/// stream `c` under the master seed, so adding chains never changes the
/// existing ones.
pub fn run_chains(
    y: &PhenotypeMatrix,
    x: &DMatrix<f64>,
    sk: &SpectralKinship,
    config: &GibbsConfig,
) -> Result<PosteriorDraws> {
    let d = y.n_traits();
    config.validate(d)?;
    let data = transform_data(y, x, sk)?;
    let priors = Priors::new(config.prior(d)?, config.coef_prior_variance)?;
    let init = initial_state(&y.values, x.nrows())?;
    let chains = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_chain(&data, init.clone(), &priors, config, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorDraws {
        config: config.clone(),
        trait_ids: y.trait_ids.clone(),
        n_covariates: x.nrows(),
        chains,
    })
}

/// Intercept-only design: a `1 x n` row of ones.
pub fn intercept(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(1, n, 1.0)
}

pub fn chain_file_name(chain: usize) -> String {
    format!("draws_chain{}.csv", chain + 1)
}

/// Writes one CSV per chain plus a `draws.meta` key-value file echoing the
/// configuration.
pub fn write_draws(dir: impl AsRef<Path>, draws: &PosteriorDraws) -> Result<()> {
    let dir = dir.as_ref();
    let d = draws.n_traits();
    let params = Parameter::stored(d, draws.n_covariates);
    for (c, chain) in draws.chains.iter().enumerate() {
        let path = dir.join(chain_file_name(c));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let res: std::io::Result<()> = (|| {
            let header: Vec<String> = params.iter().map(|p| p.name(d)).collect();
            writeln!(w, "iter,{}", header.join(","))?;
            for (t, dr) in chain.iterations.iter().zip(&chain.draws) {
                let vals: Vec<String> = params.iter().map(|p| fmt_f64(p.value(dr))).collect();
                writeln!(w, "{t},{}", vals.join(","))?;
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(DRAWS_META_FILE);
    let cfg = &draws.config;
    let mut meta = vec![
        format!("traits={}", draws.trait_ids.join("\t")),
        format!("covariates={}", draws.n_covariates),
        format!("chains={}", cfg.n_chains),
        format!("iter={}", cfg.n_iter),
        format!("burnin={}", cfg.burn_in),
        format!("thin={}", cfg.thin),
        format!("seed={}", cfg.seed),
        format!("coef_prior_variance={}", fmt_f64(cfg.coef_prior_variance)),
    ];
    if let Some(dof) = cfg.wishart_dof {
        meta.push(format!("wishart_dof={}", fmt_f64(dof)));
    }
    meta.push(match &cfg.wishart_scale_mode {
        WishartScaleMode::Identity => "wishart_scale=identity".to_owned(),
        WishartScaleMode::UserMatrix(m) => format!(
            "wishart_scale={}",
            m.as_slice().iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
        ),
    });
    std::fs::write(&path, meta.join("\n") + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads draws written by [`write_draws`].
pub fn read_draws(dir: impl AsRef<Path>) -> Result<PosteriorDraws> {
    let dir = dir.as_ref();
    let meta_path = dir.join(DRAWS_META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut kv = std::collections::HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("{DRAWS_META_FILE}: `{line}` is not key=value"),
        })?;
        kv.insert(k.trim().to_owned(), v.to_owned());
    }
    let get = |key: &str| {
        kv.get(key).cloned().ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("{DRAWS_META_FILE}: missing `{key}`"),
        })
    };
    let num = |key: &str| -> Result<f64> {
        get(key)?.trim().parse::<f64>().map_err(|_| Error::Parse {
            line: 0,
            message: format!("{DRAWS_META_FILE}: `{key}` is not a number"),
        })
    };
    let trait_ids: Vec<String> = get("traits")?.split('\t').map(str::to_owned).collect();
    let d = trait_ids.len();
    let k = num("covariates")? as usize;
    let scale = get("wishart_scale")?;
    let wishart_scale_mode = if scale.trim() == "identity" {
        WishartScaleMode::Identity
    } else {
        let vals = scale
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Parse {
                line: 0,
                message: "bad wishart_scale".into(),
            })?;
        if vals.len() != d * d {
            return Err(Error::Dim("wishart_scale has the wrong number of entries".into()));
        }
        WishartScaleMode::UserMatrix(DMatrix::from_column_slice(d, d, &vals))
    };
    let config = GibbsConfig {
        n_chains: num("chains")? as usize,
        n_iter: num("iter")? as usize,
        burn_in: num("burnin")? as usize,
        thin: num("thin")? as usize,
        seed: get("seed")?.trim().parse().map_err(|_| Error::Parse {
            line: 0,
            message: "bad seed".into(),
        })?,
        wishart_scale_mode,
        wishart_dof: if kv.contains_key("wishart_dof") { Some(num("wishart_dof")?) } else { None },
        coef_prior_variance: num("coef_prior_variance")?,
    };
    let params = Parameter::stored(d, k);
    let mut chains = Vec::with_capacity(config.n_chains);
    for c in 0..config.n_chains {
        let path = dir.join(chain_file_name(c));
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or(Error::EmptyInput)?
            .map_err(|e| Error::io(&path, e))?;
        if header.split(',').count() != params.len() + 1 {
            return Err(Error::Dim(format!("{}: unexpected column count", path.display())));
        }
        let mut chain = ChainDraws {
            stream: c as u64,
            iterations: Vec::new(),
            draws: Vec::new(),
        };
        for (rec, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let bad = || Error::Parse {
                line: rec + 1,
                message: format!("{}: malformed draw row", path.display()),
            };
            let t: usize = fields.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
            let vals = fields
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            if vals.len() != params.len() {
                return Err(bad());
            }
            let mut dr = Draw {
                sigma_g: DMatrix::zeros(d, d),
                sigma_e: DMatrix::zeros(d, d),
                beta: DMatrix::zeros(d, k),
            };
            for (p, v) in params.iter().zip(vals) {
                match *p {
                    Parameter::SigmaG(i, j) => {
                        dr.sigma_g[(i, j)] = v;
                        dr.sigma_g[(j, i)] = v;
                    }
                    Parameter::SigmaE(i, j) => {
                        dr.sigma_e[(i, j)] = v;
                        dr.sigma_e[(j, i)] = v;
                    }
                    Parameter::Beta(i, l) => dr.beta[(i, l)] = v,
                    Parameter::Heritability(_) => unreachable!("not stored"),
                }
            }
            chain.iterations.push(t);
            chain.draws.push(dr);
        }
        chains.push(chain);
    }
    Ok(PosteriorDraws {
        config,
        trait_ids,
        n_covariates: k,
        chains,
    })
}
