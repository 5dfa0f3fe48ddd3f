//! Synthetic genotypes and phenotypes drawn from the model itself.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};
use crate::ingest::{GenotypeMatrix, PhenotypeMatrix};
use crate::kinship::SpectralKinship;
use crate::matstats::{standard_normal_matrix, SpdMatrix};

const MAX_RESAMPLES_PER_SNP: usize = 10_000;

/// Genotypes with the number of monomorphic rows that had to be redrawn.
#[derive(Debug, Clone)]
pub struct SimulatedGenotypes {
    pub genotypes: GenotypeMatrix,
    pub resampled: usize,
}

/// Dosages `Binomial(2, f)` with `f ~ U(low, high)` per SNP. Rows without
/// variation are redrawn (frequency included).
pub fn simulate_genotypes<R: Rng + ?Sized>(
    n: usize,
    p: usize,
    maf_range: (f64, f64),
    rng: &mut R,
) -> Result<SimulatedGenotypes> {
    let (low, high) = maf_range;
    if !(low > 0.0 && low <= high && high <= 0.5) {
        return Err(Error::InvalidMaf(format!("need 0 < low <= high <= 0.5, got ({low}, {high})")));
    }
    if n < 2 {
        return Err(Error::InvalidMaf(format!("cannot draw polymorphic SNPs for {n} samples")));
    }
    let mut values = DMatrix::zeros(p, n);
    let mut resampled = 0;
    for i in 0..p {
        let mut attempts = 0;
        loop {
            let f = if low == high { low } else { rng.random_range(low..=high) };
            let binom = Binomial::new(2, f).expect("frequency lies in (0, 0.5]");
            let row: Vec<f64> = (0..n).map(|_| binom.sample(rng) as f64).collect();
            if row.iter().any(|&v| v != row[0]) {
                for (j, v) in row.into_iter().enumerate() {
                    values[(i, j)] = v;
                }
                break;
            }
            attempts += 1;
            resampled += 1;
            if attempts >= MAX_RESAMPLES_PER_SNP {
                return Err(Error::InvalidMaf(format!(
                    "range ({low}, {high}) gave {MAX_RESAMPLES_PER_SNP} monomorphic draws in a row for n = {n}"
                )));
            }
        }
    }
    if resampled > 0 {
        log::warn!("resampled {resampled} monomorphic SNP rows");
    }
    let genotypes = GenotypeMatrix::new(
        values,
        (1..=p).map(|i| format!("snp{i}")).collect(),
        (1..=n).map(|j| format!("s{j}")).collect(),
    )?;
    Ok(SimulatedGenotypes { genotypes, resampled })
}

/// Unit total variance per trait: `Sigma_ii = h_i`, `Sigma_e,ii = 1 - h_i`,
/// genetic covariance `rg sqrt(h_i h_j)`, uncorrelated environment.
pub fn covariances_from_h2(h2: &[f64], rg: f64) -> Result<(SpdMatrix, SpdMatrix)> {
    if let Some(h) = h2.iter().find(|h| !(**h > 0.0 && **h < 1.0)) {
        return Err(Error::InvalidConfig(format!("heritability {h} must lie in (0, 1)")));
    }
    if !(-1.0..=1.0).contains(&rg) {
        return Err(Error::InvalidConfig(format!("genetic correlation {rg} must lie in [-1, 1]")));
    }
    let d = h2.len();
    let sg = DMatrix::from_fn(d, d, |i, j| if i == j { h2[i] } else { rg * (h2[i] * h2[j]).sqrt() });
    let se = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 - h2[i] } else { 0.0 });
    Ok((SpdMatrix::new(sg)?, SpdMatrix::new(se)?))
}

/// `Y = beta X + eta + eps`, with `eta = L_Sigma G diag(sqrt r) U^t` and
/// `eps = L_Sigma_e E` for standard normal `G`, `E`.
pub fn simulate_phenotypes<R: Rng + ?Sized>(
    sk: &SpectralKinship,
    sigma_g: &SpdMatrix,
    sigma_e: &SpdMatrix,
    beta: &DMatrix<f64>,
    x: &DMatrix<f64>,
    rng: &mut R,
) -> Result<PhenotypeMatrix> {
    let n = sk.n();
    let d = sigma_g.dim();
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
    let sqrt_r = sk.eigvals().map(f64::sqrt);
    let g = standard_normal_matrix(d, n, rng);
    let e = standard_normal_matrix(d, n, rng);
    let eta = sigma_g.chol_l() * g * DMatrix::from_diagonal(&sqrt_r) * sk.eigvecs().transpose();
    let eps = sigma_e.chol_l() * e;
    let y = beta * x + eta + eps;
    PhenotypeMatrix::new(y, (1..=d).map(|i| format!("t{i}")).collect(), sk.sample_ids().to_vec())
}

/// Masks exactly `round(fraction_i n)` entries of trait `i`, chosen uniformly
/// among its currently observed entries.
pub fn mask_at_random<R: Rng + ?Sized>(y: &PhenotypeMatrix, fractions: &[f64], rng: &mut R) -> Result<PhenotypeMatrix> {
    if fractions.len() != y.n_traits() {
        return Err(Error::Dim(format!("{} fractions for {} traits", fractions.len(), y.n_traits())));
    }
    if let Some(&f) = fractions.iter().find(|f| !(**f >= 0.0 && **f < 1.0)) {
        return Err(Error::InvalidFraction(f));
    }
    let mut out = y.clone();
    let n = y.n_samples();
    for (i, &f) in fractions.iter().enumerate() {
        let observed: Vec<usize> = (0..n).filter(|&j| !y.missing_mask[(i, j)]).collect();
        let count = ((f * n as f64).round() as usize).min(observed.len());
        for k in sample(rng, observed.len(), count) {
            let j = observed[k];
            out.values[(i, j)] = f64::NAN;
            out.missing_mask[(i, j)] = true;
        }
    }
    Ok(out)
}

/// Sample covariance (n - 1 divisor) of the columns of a d x n matrix.
pub fn column_covariance(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.ncols();
    let mean: DVector<f64> = m.column_mean();
    let centered = m - &mean * DMatrix::from_element(1, n, 1.0);
    &centered * centered.transpose() / (n - 1) as f64
}
