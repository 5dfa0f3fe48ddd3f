//! Effect-size prior simulation and the ridge-regression reading of the model.
//!
//! Under the ridge form `G = beta_z Z` with columns `beta_z[:, j] ~ N(0,
//! sigma2_beta Sigma_beta)`, `Cov(vec G) = sigma2_beta Z^t Z (x) Sigma_beta`.
//! With `K = Z^t Z / p` this equals the mixed model's `K (x) Sigma` exactly when
//! `Sigma = p sigma2_beta Sigma_beta`.
//!
//! `Sigma_beta` is the inverse of a `W(V, nu)` draw, the same convention the
//! sampler uses for the covariance priors.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::GenotypeMatrix;
use crate::matstats::{kron, sample_inverse_wishart, standard_normal_matrix, vec_of, SpdMatrix, WishartPrior};

pub const HIST_LOW: f64 = -5.0;
pub const HIST_HIGH: f64 = 5.0;
pub const HIST_WIDTH: f64 = 0.01;
const MAX_SHARDS: usize = 64;

#[derive(Debug, Clone)]
pub struct EffectSizePriorSpec {
    pub wishart: WishartPrior,
    /// Per-SNP effect variance.
    pub sigma2_beta: f64,
    /// SNPs per draw.
    pub p: usize,
}

impl EffectSizePriorSpec {
    pub fn new(wishart: WishartPrior, sigma2_beta: f64, p: usize) -> Result<Self> {
        if !(sigma2_beta > 0.0) || !sigma2_beta.is_finite() {
            return Err(Error::InvalidConfig(format!("sigma2_beta {sigma2_beta} must be positive")));
        }
        if p == 0 {
            return Err(Error::InvalidConfig("need at least one SNP per draw".into()));
        }
        Ok(EffectSizePriorSpec { wishart, sigma2_beta, p })
    }

    pub fn d(&self) -> usize {
        self.wishart.dim()
    }
}

/// Fixed grid on `[-5, 5]` with 0.01 bins plus overflow counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn n_bins() -> usize {
        ((HIST_HIGH - HIST_LOW) / HIST_WIDTH).round() as usize
    }

    pub fn new() -> Self {
        Histogram {
            counts: vec![0; Self::n_bins()],
            underflow: 0,
            overflow: 0,
        }
    }

    pub fn add(&mut self, x: f64) {
        if x < HIST_LOW {
            self.underflow += 1;
        } else if x >= HIST_HIGH {
            self.overflow += 1;
        } else {
            let bin = (((x - HIST_LOW) / HIST_WIDTH) as usize).min(self.counts.len() - 1);
            self.counts[bin] += 1;
        }
    }

    fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.underflow += other.underflow;
        self.overflow += other.overflow;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        HIST_LOW + (i as f64 + 0.5) * HIST_WIDTH
    }

    /// Count per unit width over all values, tails included in the total.
    pub fn densities(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / (total * HIST_WIDTH)).collect()
    }

    /// Fraction of all values falling in bins whose centers satisfy `|c| <= radius`.
    pub fn mass_within(&self, radius: f64) -> f64 {
        let inside: u64 = (0..self.counts.len())
            .filter(|&i| self.bin_center(i).abs() <= radius)
            .map(|i| self.counts[i])
            .sum();
        inside as f64 / self.total() as f64
    }
}

impl Default for Histogram {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone)]
pub struct EffectPriorSample {
    pub n_draws: usize,
    /// Pooled over traits and SNPs.
    pub histogram: Histogram,
    /// Monte Carlo `E[beta_j beta_j^t]`; its target is `sigma2_beta E[Sigma_beta]`.
    pub second_moment: DMatrix<f64>,
    /// Standard error of each entry, computed from per-draw averages over SNPs
    /// because SNPs within a draw share `Sigma_beta`.
    pub second_moment_se: DMatrix<f64>,
    /// Per-trait sample kurtosis of the effects (3 for a normal).
    pub kurtosis: Vec<f64>,
}

struct Shard {
    hist: Histogram,
    sum: DMatrix<f64>,
    sum_sq: DMatrix<f64>,
    // per trait: sums of x, x^2, x^3, x^4
    power_sums: Vec<[f64; 4]>,
}

fn shard_bounds(n_draws: usize) -> Vec<(u64, usize)> {
    let shards = n_draws.clamp(1, MAX_SHARDS);
    (0..shards)
        .map(|s| (s as u64, n_draws / shards + usize::from(s < n_draws % shards)))
        .collect()
}

/// Draws effect matrices (`d x p` each) from the hierarchical prior. Work is
/// split into fixed shards with their own streams and merged in shard order,
/// so the result does not depend on the thread count.
pub fn sample_effect_prior(spec: &EffectSizePriorSpec, n_draws: usize, seed: u64) -> Result<EffectPriorSample> {
    if n_draws == 0 {
        return Err(Error::InvalidConfig("need at least one draw".into()));
    }
    let d = spec.d();
    let shards = shard_bounds(n_draws)
        .into_par_iter()
        .map(|(stream, count)| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let mut shard = Shard {
                hist: Histogram::new(),
                sum: DMatrix::zeros(d, d),
                sum_sq: DMatrix::zeros(d, d),
                power_sums: vec![[0.0; 4]; d],
            };
            for _ in 0..count {
                let sigma_beta = sample_inverse_wishart(&spec.wishart, &mut rng)?;
                let l = sigma_beta.chol_l() * spec.sigma2_beta.sqrt();
                let beta = l * standard_normal_matrix(d, spec.p, &mut rng);
                for &v in beta.iter() {
                    shard.hist.add(v);
                }
                for i in 0..d {
                    for &v in beta.row(i).iter() {
                        let ps = &mut shard.power_sums[i];
                        ps[0] += v;
                        ps[1] += v * v;
                        ps[2] += v * v * v;
                        ps[3] += v * v * v * v;
                    }
                }
                let avg = &beta * beta.transpose() / spec.p as f64;
                shard.sum_sq += avg.component_mul(&avg);
                shard.sum += avg;
            }
            Ok(shard)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut hist = Histogram::new();
    let mut sum = DMatrix::zeros(d, d);
    let mut sum_sq = DMatrix::zeros(d, d);
    let mut power_sums = vec![[0.0; 4]; d];
    for s in &shards {
        hist.merge(&s.hist);
        sum += &s.sum;
        sum_sq += &s.sum_sq;
        for (acc, ps) in power_sums.iter_mut().zip(&s.power_sums) {
            for k in 0..4 {
                acc[k] += ps[k];
            }
        }
    }
    let r = n_draws as f64;
    let second_moment = &sum / r;
    let second_moment_se = DMatrix::from_fn(d, d, |a, b| {
        let m = second_moment[(a, b)];
        ((sum_sq[(a, b)] / r - m * m).max(0.0) / r).sqrt()
    });
    let m = r * spec.p as f64;
    let kurtosis = power_sums
        .iter()
        .map(|ps| {
            let mu = ps[0] / m;
            let (e2, e3, e4) = (ps[1] / m, ps[2] / m, ps[3] / m);
            let var = e2 - mu * mu;
            let c4 = e4 - 4.0 * mu * e3 + 6.0 * mu * mu * e2 - 3.0 * mu.powi(4);
            c4 / (var * var)
        })
        .collect();
    Ok(EffectPriorSample {
        n_draws,
        histogram: hist,
        second_moment,
        second_moment_se,
        kurtosis,
    })
}

/// Analytic covariance of `vec(beta_z Z)` under the ridge prior:
/// `sigma2_beta Z^t Z (x) Sigma_beta`.
pub fn ridge_covariance(z: &DMatrix<f64>, sigma_beta: &SpdMatrix, sigma2_beta: f64) -> DMatrix<f64> {
    kron(&(z.transpose() * z), sigma_beta.matrix()) * sigma2_beta
}

/// Mixed-model covariance of `vec(eta)`: `K (x) Sigma`.
pub fn mixed_model_covariance(k: &DMatrix<f64>, sigma: &SpdMatrix) -> DMatrix<f64> {
    kron(k, sigma.matrix())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeReport {
    /// Largest `|MC - analytic|` over entries of the `nd x nd` covariance.
    pub max_dev: f64,
    /// Monte Carlo standard error of the entry attaining `max_dev`.
    pub mc_se: f64,
    /// Largest deviation in units of its own standard error.
    pub max_z: f64,
    pub pass: bool,
}

/// Compares the Monte Carlo covariance of genetic values `G = beta_z Z`
/// against the analytic ridge covariance, entry by entry. Passes when every
/// entry lies within 5 Monte Carlo standard errors.
pub fn verify_ridge_equivalence(
    z: &GenotypeMatrix,
    sigma_beta: &SpdMatrix,
    sigma2_beta: f64,
    n_draws: usize,
    seed: u64,
) -> Result<RidgeReport> {
    if z.n_missing() > 0 {
        return Err(Error::MissingData(z.n_missing()));
    }
    if n_draws < 2 {
        return Err(Error::InvalidConfig("need at least two draws".into()));
    }
    let zm = &z.values;
    let (p, n) = zm.shape();
    let d = sigma_beta.dim();
    let nd = n * d;
    let l = sigma_beta.chol_l() * sigma2_beta.sqrt();
    let parts = shard_bounds(n_draws)
        .into_par_iter()
        .map(|(stream, count)| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let mut sum = DMatrix::zeros(nd, nd);
            let mut sum_sq = DMatrix::zeros(nd, nd);
            for _ in 0..count {
                let beta = &l * standard_normal_matrix(d, p, &mut rng);
                let g = vec_of(&(beta * zm));
                let outer = &g * g.transpose();
                sum_sq += outer.component_mul(&outer);
                sum += outer;
            }
            (sum, sum_sq)
        })
        .collect::<Vec<_>>();
    let mut sum = DMatrix::zeros(nd, nd);
    let mut sum_sq = DMatrix::zeros(nd, nd);
    for (s, q) in &parts {
        sum += s;
        sum_sq += q;
    }
    let target = ridge_covariance(zm, sigma_beta, sigma2_beta);
    let r = n_draws as f64;
    let mut report = RidgeReport {
        max_dev: 0.0,
        mc_se: 0.0,
        max_z: 0.0,
        pass: true,
    };
    for a in 0..nd {
        for b in 0..nd {
            let m = sum[(a, b)] / r;
            let se = ((sum_sq[(a, b)] / r - m * m).max(0.0) / r).sqrt();
            let dev = (m - target[(a, b)]).abs();
            if dev > report.max_dev {
                report.max_dev = dev;
                report.mc_se = se;
            }
            let z = if se > 0.0 {
                dev / se
            } else if dev > 1e-12 * target[(a, b)].abs().max(1.0) {
                f64::INFINITY
            } else {
                0.0
            };
            report.max_z = report.max_z.max(z);
        }
    }
    report.pass = report.max_z < 5.0;
    Ok(report)
}
