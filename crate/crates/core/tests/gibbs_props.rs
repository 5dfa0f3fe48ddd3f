use mvherit_core::gibbs::*;
use mvherit_core::ingest::{standardize, PhenotypeMatrix};
use mvherit_core::kinship::{compute_kinship, SpectralKinship};
use mvherit_core::matstats::SpdMatrix;
use mvherit_core::posterior::{heritability, summarize};
use mvherit_core::reml::univariate_ml;
use mvherit_core::simulate::{simulate_genotypes, simulate_phenotypes};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn kinship(n: usize, p: usize, seed: u64) -> SpectralKinship {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let g = simulate_genotypes(n, p, (0.05, 0.5), &mut rng).unwrap();
    compute_kinship(&standardize(&g.genotypes).unwrap()).unwrap()
}

fn config(iter: usize, burn: usize, seed: u64) -> GibbsConfig {
    GibbsConfig {
        n_chains: 3,
        n_iter: iter,
        burn_in: burn,
        thin: 5,
        seed,
        ..GibbsConfig::default()
    }
}

#[test]
fn default_protocol_keeps_5000_per_chain() {
    let c = GibbsConfig::default();
    assert_eq!((c.n_chains, c.n_iter, c.burn_in, c.thin), (3, 35_000, 10_000, 5));
    assert_eq!(c.kept_per_chain(), 5000);
    assert_eq!((1..=c.n_iter).filter(|&t| c.keeps(t)).count(), 5000);
}

#[test]
fn same_seed_same_draws() {
    let n = 60;
    let sk = kinship(n, 200, 1);
    let (sg, se) = (SpdMatrix::identity(2), SpdMatrix::identity(2));
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let y = simulate_phenotypes(&sk, &sg, &se, &DMatrix::zeros(2, 1), &intercept(n), &mut rng).unwrap();
    let cfg = config(700, 200, 9);
    let a = run_chains(&y, &intercept(n), &sk, &cfg).unwrap();
    let b = run_chains(&y, &intercept(n), &sk, &cfg).unwrap();
    assert_eq!(a, b);
    let mut more = cfg.clone();
    more.n_chains = 4;
    let c = run_chains(&y, &intercept(n), &sk, &more).unwrap();
    assert_eq!(c.chains[..3], a.chains[..]);
}

#[test]
fn recovers_simulated_covariances() {
    let n = 400;
    let sk = kinship(n, 1000, 3);
    let sg = SpdMatrix::from_diagonal(&[1.5, 2.3]).unwrap();
    let se = SpdMatrix::from_diagonal(&[0.25, 0.35]).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let beta = DMatrix::from_row_slice(2, 1, &[1.0, -2.0]);
    let y = simulate_phenotypes(&sk, &sg, &se, &beta, &intercept(n), &mut rng).unwrap();
    let draws = run_chains(&y, &intercept(n), &sk, &config(6000, 1000, 5)).unwrap();
    for dr in draws.chains.iter().flat_map(|c| &c.draws) {
        assert!(dr.sigma_g.clone().cholesky().is_some() && dr.sigma_e.clone().cholesky().is_some());
    }
    let truth = [(Parameter::SigmaG(0, 0), 1.5), (Parameter::SigmaG(1, 1), 2.3), (Parameter::SigmaE(0, 0), 0.25), (Parameter::SigmaE(1, 1), 0.35), (Parameter::SigmaG(0, 1), 0.0)];
    for (param, value) in truth {
        let s = summarize(&draws, param).unwrap();
        assert!((s.mean - value).abs() < 3.0 * s.sd, "{param:?}: {} +- {}", s.mean, s.sd);
    }
}

#[test]
fn trait_permutation_permutes_summaries() {
    let n = 150;
    let sk = kinship(n, 400, 6);
    let sg = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.6])).unwrap();
    let se = SpdMatrix::from_diagonal(&[0.5, 0.8]).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let y = simulate_phenotypes(&sk, &sg, &se, &DMatrix::zeros(2, 1), &intercept(n), &mut rng).unwrap();
    let swapped = PhenotypeMatrix::new(
        DMatrix::from_fn(2, n, |a, j| y.values[(1 - a, j)]),
        vec!["t2".into(), "t1".into()],
        y.sample_ids.clone(),
    )
    .unwrap();
    let cfg = config(4000, 500, 8);
    let a = run_chains(&y, &intercept(n), &sk, &cfg).unwrap();
    let b = run_chains(&swapped, &intercept(n), &sk, &cfg).unwrap();
    let pairs = [
        (Parameter::SigmaG(0, 0), Parameter::SigmaG(1, 1)),
        (Parameter::SigmaG(0, 1), Parameter::SigmaG(1, 0)),
        (Parameter::SigmaE(1, 1), Parameter::SigmaE(0, 0)),
    ];
    for (p, q) in pairs {
        let (sa, sb) = (summarize(&a, p).unwrap(), summarize(&b, q).unwrap());
        let mc = (sa.timeseries_se.powi(2) + sb.timeseries_se.powi(2)).sqrt();
        assert!((sa.mean - sb.mean).abs() < 5.0 * mc, "{p:?}: {} vs {}", sa.mean, sb.mean);
    }
}

#[test]
fn single_trait_chain_agrees_with_univariate_ml() {
    let n = 300;
    let sk = kinship(n, 300, 9);
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let y = simulate_phenotypes(
        &sk,
        &SpdMatrix::from_diagonal(&[0.6]).unwrap(),
        &SpdMatrix::from_diagonal(&[0.4]).unwrap(),
        &DMatrix::zeros(1, 1),
        &intercept(n),
        &mut rng,
    )
    .unwrap();
    let draws = run_chains(&y, &intercept(n), &sk, &config(5000, 1000, 11)).unwrap();
    let h = heritability(&draws).unwrap().summaries[0].clone();
    let ml = univariate_ml(y.values.row(0).iter().copied().collect::<Vec<_>>().as_slice(), &intercept(n), &sk).unwrap();
    let tol = 3.0 * h.sd.max(ml.se_h2);
    assert!((h.mean - ml.h2).abs() < tol, "Bayes {} +- {}, ML {} +- {}", h.mean, h.sd, ml.h2, ml.se_h2);
}
