//! Monte Carlo checks of the distributional kernels.

use mvherit_core::matstats::*;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[test]
fn identity_matrix_normal_entries_pass_ks() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let m = DMatrix::zeros(10, 100);
    let mut xs = Vec::with_capacity(100_000);
    for _ in 0..100 {
        let x = sample_matnorm(&m, &SpdMatrix::identity(100), &SpdMatrix::identity(10), &mut rng).unwrap();
        xs.extend(x.iter().copied());
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    // p = 0.001 critical value of the Kolmogorov distribution
    assert!(d * n.sqrt() < 1.949, "KS statistic {}", d * n.sqrt());
}

#[test]
fn matrix_normal_row_moment() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let a = SpdMatrix::new(DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5])).unwrap();
    let b = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.7])).unwrap();
    let m = DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.5, 2.0, 0.0, 3.0]);
    let draws = 100_000;
    let mut sum = DMatrix::zeros(2, 2);
    let mut sum_sq = DMatrix::zeros(2, 2);
    let mut mean = DMatrix::zeros(2, 3);
    for _ in 0..draws {
        let x = sample_matnorm(&m, &a, &b, &mut rng).unwrap();
        let c = &x - &m;
        let outer = &c * c.transpose();
        sum_sq += outer.component_mul(&outer);
        sum += outer;
        mean += x;
    }
    let r = draws as f64;
    let target = b.matrix() * a.matrix().trace();
    for i in 0..2 {
        for j in 0..2 {
            let mu = sum[(i, j)] / r;
            let se = ((sum_sq[(i, j)] / r - mu * mu) / r).sqrt();
            assert!((mu - target[(i, j)]).abs() < 5.0 * se, "({i},{j}) {mu} vs {}", target[(i, j)]);
        }
    }
    assert!((mean / r - m).amax() < 0.02);
}

#[test]
fn scalar_wishart_is_chi_square() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let prior = WishartPrior::new(SpdMatrix::identity(1), 5.0).unwrap();
    let draws: Vec<f64> = (0..100_000).map(|_| sample_wishart(&prior, &mut rng).unwrap().matrix()[(0, 0)]).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    // Var(chi2_5) = 10
    let se = (10.0 / draws.len() as f64).sqrt();
    assert!((mean - 5.0).abs() < 5.0 * se);
}

#[test]
fn bivariate_wishart_mean() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let prior = WishartPrior::new(SpdMatrix::identity(2), 2.0).unwrap();
    let n = 100_000;
    let mut sum = DMatrix::zeros(2, 2);
    let mut sum_sq = DMatrix::zeros(2, 2);
    for _ in 0..n {
        let w = sample_wishart(&prior, &mut rng).unwrap().into_matrix();
        sum_sq += w.component_mul(&w);
        sum += w;
    }
    let r = n as f64;
    let target = DMatrix::<f64>::identity(2, 2) * 2.0;
    for i in 0..2 {
        for j in 0..2 {
            let mu = sum[(i, j)] / r;
            let se = ((sum_sq[(i, j)] / r - mu * mu) / r).sqrt();
            assert!((mu - target[(i, j)]).abs() < 5.0 * se);
        }
    }
}

/// Gamma(shape k, scale s) log-density.
fn ln_gamma_pdf(x: f64, k: f64, s: f64) -> f64 {
    (k - 1.0) * x.ln() - x / s - k * s.ln() - libm::lgamma(k)
}

#[test]
fn scalar_wishart_conjugacy_against_grid_posterior() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let (v, nu) = (1.0, 1.0);
    let sigma = SpdMatrix::from_diagonal(&[0.7]).unwrap();
    let xs: Vec<f64> = (0..40).map(|_| sample_mvn(&nalgebra::DVector::zeros(1), &sigma, &mut rng)[0]).collect();
    let s: f64 = xs.iter().map(|x| x * x).sum();
    let n = xs.len() as f64;
    // W_1(V, nu) on the precision is Gamma(nu/2, 2V); the conjugate update is W((1/V + S)^{-1}, nu + n)
    let (k_post, s_post) = ((nu + n) / 2.0, 2.0 / (1.0 / v + s));
    let grid: Vec<f64> = (1..=200).map(|i| i as f64 * 0.02).collect();
    let brute: Vec<f64> = grid
        .iter()
        .map(|&lam| ln_gamma_pdf(lam, nu / 2.0, 2.0 * v) + 0.5 * n * lam.ln() - 0.5 * lam * s)
        .collect();
    let top = brute.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let brute: Vec<f64> = brute.iter().map(|l| (l - top).exp()).collect();
    let analytic: Vec<f64> = grid.iter().map(|&lam| ln_gamma_pdf(lam, k_post, s_post).exp()).collect();
    let (zb, za) = (brute.iter().sum::<f64>(), analytic.iter().sum::<f64>());
    let tv: f64 = brute.iter().zip(&analytic).map(|(b, a)| (b / zb - a / za).abs()).sum::<f64>() / 2.0;
    assert!(tv < 0.01, "total variation {tv}");
}
