use std::io::{BufWriter, Write};

use mvherit_core::ingest::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

#[test]
fn full_size_genotype_file() {
    let (p, n) = (12_226, 1_940);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("geno.txt");
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    {
        let mut w = BufWriter::new(std::fs::File::create(&path).unwrap());
        let tokens = ["0", "1", "2", "NA"];
        for i in 0..p {
            write!(w, "rs{i}").unwrap();
            for _ in 0..n {
                // roughly 1% missing
                let t = if rng.random::<f64>() < 0.01 { 3 } else { rng.random_range(0..3) };
                write!(w, " {}", tokens[t]).unwrap();
            }
            writeln!(w).unwrap();
        }
    }
    let g = load_genotypes(&path).unwrap();
    assert_eq!((g.n_snps(), g.n_samples()), (p, n));
    assert_eq!(g.snp_ids[12_225], "rs12225");
    assert!(g.n_missing() > 0);
    assert_eq!(g.values.iter().filter(|v| v.is_nan()).count(), g.n_missing());
}

#[test]
fn phenotype_missingness_rates() {
    let mut text = String::from("sample_id\tt1\tt2\n");
    for j in 0..100 {
        let a = if j < 27 { "NA".to_owned() } else { format!("{}", j as f64 * 0.1) };
        let b = if j >= 82 { "NA".to_owned() } else { format!("{}", -(j as f64)) };
        text.push_str(&format!("s{j}\t{a}\t{b}\n"));
    }
    let y = read_phenotypes(text.as_bytes()).unwrap();
    assert_eq!(y.missingness(), vec![0.27, 0.18]);
}

#[test]
fn written_files_round_trip_bitwise() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let vals = DMatrix::from_fn(3, 25, |_, _| {
        if rng.random::<f64>() < 0.1 {
            f64::NAN
        } else {
            rng.random::<f64>() * 1e3 - 500.0
        }
    });
    let y = PhenotypeMatrix::new(
        vals,
        vec!["a".into(), "b".into(), "c".into()],
        (0..25).map(|j| format!("id{j}")).collect(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("y.tsv");
    save_phenotypes(&path, &y).unwrap();
    let back = load_phenotypes(&path).unwrap();
    assert_eq!(back.missing_mask, y.missing_mask);
    for (a, b) in back.values.iter().zip(y.values.iter()) {
        assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
    }

    let g = GenotypeMatrix::new(
        DMatrix::from_fn(4, 6, |i, j| if (i + j) % 5 == 0 { f64::NAN } else { ((i * j) % 3) as f64 }),
        (0..4).map(|i| format!("snp{i}")).collect(),
        (0..6).map(|j| format!("s{j}")).collect(),
    )
    .unwrap();
    let path = dir.path().join("g.txt");
    save_genotypes(&path, &g).unwrap();
    let back = load_genotypes(&path).unwrap();
    assert_eq!(back.missing_mask, g.missing_mask);
    assert_eq!(back.sample_ids, g.sample_ids);
}

fn genotype_strategy() -> impl Strategy<Value = GenotypeMatrix> {
    (1usize..6, 3usize..20).prop_flat_map(|(p, n)| {
        proptest::collection::vec(proptest::option::weighted(0.85, 0u8..3), p * n).prop_map(move |cells| {
            let vals = DMatrix::from_fn(p, n, |i, j| cells[i * n + j].map_or(f64::NAN, f64::from));
            GenotypeMatrix::new(
                vals,
                (0..p).map(|i| format!("r{i}")).collect(),
                (0..n).map(|j| format!("s{j}")).collect(),
            )
            .unwrap()
        })
    })
}

proptest! {
    #[test]
    fn standardize_is_idempotent(g in genotype_strategy()) {
        let (kept, _) = drop_degenerate_snps(&g);
        prop_assume!(kept.n_snps() > 0);
        let imputed = impute_genotype_means(&kept).unwrap();
        // mean imputation can still leave a row constant
        let Ok(z) = standardize(&imputed) else { return Ok(()); };
        let zz = standardize(&z).unwrap();
        prop_assert!((&zz.values - &z.values).amax() < 1e-12);
        let n = z.n_samples() as f64;
        for row in z.values.row_iter() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn mean_imputation_keeps_observed_means(g in genotype_strategy()) {
        let (kept, _) = drop_degenerate_snps(&g);
        prop_assume!(kept.n_snps() > 0);
        let imputed = impute_genotype_means(&kept).unwrap();
        prop_assert_eq!(imputed.n_missing(), 0);
        for i in 0..kept.n_snps() {
            let obs: Vec<f64> = (0..kept.n_samples())
                .filter(|&j| !kept.missing_mask[(i, j)])
                .map(|j| kept.values[(i, j)])
                .collect();
            let before = obs.iter().sum::<f64>() / obs.len() as f64;
            let after = imputed.values.row(i).sum() / kept.n_samples() as f64;
            prop_assert!((before - after).abs() < 1e-12);
        }
    }
}
