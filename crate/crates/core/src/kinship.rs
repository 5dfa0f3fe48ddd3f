//! Relatedness matrix `K = Z^T Z / p` and its eigendecomposition.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::ingest::GenotypeMatrix;

pub const KINSHIP_FILE: &str = "K.tsv";
pub const EIGEN_FILE: &str = "K.eigen.tsv";

/// Raw eigenvalues below `-PSD_TOL * max_eigenvalue` abort the decomposition.
const PSD_TOL: f64 = 1e-8;
const STANDARDIZED_TOL: f64 = 1e-8;
const SNP_BLOCK: usize = 1024;

/// Kinship matrix together with `K = U diag(r) U^T`, eigenvalues descending.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralKinship {
    k: DMatrix<f64>,
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
    scale: f64,
    sample_ids: Vec<String>,
}

impl SpectralKinship {
    /// Decomposes a symmetric relatedness matrix. Round-off negative
    /// eigenvalues are clipped to zero.
    pub fn from_matrix(k: DMatrix<f64>, sample_ids: Vec<String>) -> Result<Self> {
        let n = k.nrows();
        if !k.is_square() || sample_ids.len() != n {
            return Err(Error::Dim(format!(
                "kinship is {}x{} with {} sample ids",
                k.nrows(),
                k.ncols(),
                sample_ids.len()
            )));
        }
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        let scale = k.amax().max(f64::MIN_POSITIVE);
        let asym = (&k - k.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(Error::Dim(format!("kinship is not symmetric (asymmetry {asym:e})")));
        }
        let k = (&k + k.transpose()) * 0.5;
        let (eigvecs, eigvals) = sorted_eigen(&k)?;
        Ok(SpectralKinship {
            k,
            eigvecs,
            eigvals,
            scale: 1.0,
            sample_ids,
        })
    }

    /// Kinship `I_n`: every individual unrelated to every other.
    pub fn identity(sample_ids: Vec<String>) -> Self {
        let n = sample_ids.len();
        SpectralKinship {
            k: DMatrix::identity(n, n),
            eigvecs: DMatrix::identity(n, n),
            eigvals: DVector::from_element(n, 1.0),
            scale: 1.0,
            sample_ids,
        }
    }

    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn eigvecs(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }

    pub fn eigvals(&self) -> &DVector<f64> {
        &self.eigvals
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn trace(&self) -> f64 {
        self.k.trace()
    }

    /// `U diag(r) U^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut ur = self.eigvecs.clone();
        for (mut col, r) in ur.column_iter_mut().zip(self.eigvals.iter()) {
            col *= *r;
        }
        ur * self.eigvecs.transpose()
    }

    /// Kinship restricted to a subset of individuals, re-decomposed.
    pub fn subset(&self, idx: &[usize]) -> Result<SpectralKinship> {
        let k = self.k.select_rows(idx).select_columns(idx);
        let ids = idx.iter().map(|&i| self.sample_ids[i].clone()).collect();
        let mut sub = SpectralKinship::from_matrix(k, ids)?;
        sub.scale = self.scale;
        Ok(sub)
    }

    /// Index of each requested sample id in this kinship's ordering.
    pub fn positions_of(&self, ids: &[String]) -> Result<Vec<usize>> {
        let index: std::collections::HashMap<&str, usize> = self
            .sample_ids
            .iter()
            .enumerate()
            .map(|(j, s)| (s.as_str(), j))
            .collect();
        ids.iter()
            .map(|s| {
                index
                    .get(s.as_str())
                    .copied()
                    .ok_or_else(|| Error::SampleMismatch(format!("sample `{s}` is not in the kinship")))
            })
            .collect()
    }
}

fn sorted_eigen(k: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = k.nrows();
    let eig = SymmetricEigen::new(k.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let max = eig.eigenvalues[order[0]];
    let min = eig.eigenvalues[order[n - 1]];
    if min < -PSD_TOL * max.max(0.0) && min < -f64::EPSILON {
        log::error!(
            "kinship eigenvalue diagnostics: n = {n}, trace = {}, max = {max:e}, min = {min:e}, \
             negative count = {}",
            k.trace(),
            eig.eigenvalues.iter().filter(|&&v| v < 0.0).count()
        );
        return Err(Error::NotPositiveSemidefinite {
            min_eigenvalue: min,
            max_eigenvalue: max,
        });
    }
    let mut vecs = DMatrix::zeros(n, n);
    let mut vals = DVector::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = eig.eigenvalues[src].max(0.0);
        let mut v = eig.eigenvectors.column(src).into_owned();
        // first clearly nonzero component positive
        let tol = 1e-12 * v.amax();
        if let Some(first) = v.iter().find(|x| x.abs() > tol) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        vecs.set_column(dst, &v);
    }
    Ok((vecs, vals))
}

fn check_standardized(z: &GenotypeMatrix) -> Result<()> {
    if z.n_missing() > 0 {
        return Err(Error::NotStandardized(format!("{} missing entries", z.n_missing())));
    }
    let n = z.n_samples() as f64;
    for (i, row) in z.values.row_iter().enumerate() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if mean.abs() > STANDARDIZED_TOL || (var - 1.0).abs() > STANDARDIZED_TOL {
            return Err(Error::NotStandardized(format!(
                "SNP `{}` has mean {mean:e} and variance {var}",
                z.snp_ids[i]
            )));
        }
    }
    Ok(())
}

/// `K = Z^T Z / p` from standardized genotypes, accumulated over SNP blocks.
pub fn compute_kinship(z: &GenotypeMatrix) -> Result<SpectralKinship> {
    let (p, n) = z.values.shape();
    if p == 0 || n == 0 {
        return Err(Error::EmptyInput);
    }
    check_standardized(z)?;
    let mut k = DMatrix::zeros(n, n);
    let mut start = 0;
    while start < p {
        let len = SNP_BLOCK.min(p - start);
        let block = z.values.rows(start, len);
        k.gemm_tr(1.0, &block, &block, 1.0);
        start += len;
    }
    k /= p as f64;
    SpectralKinship::from_matrix(k, z.sample_ids.clone())
}

/// Multiplies the kinship (and its eigenvalues) by `factor`, i.e. `K -> s K`.
pub fn rescale_kinship(sk: &SpectralKinship, factor: f64) -> Result<SpectralKinship> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::InvalidScale(factor));
    }
    if factor == 1.0 {
        return Ok(sk.clone());
    }
    Ok(SpectralKinship {
        k: &sk.k * factor,
        eigvecs: sk.eigvecs.clone(),
        eigvals: &sk.eigvals * factor,
        scale: sk.scale * factor,
        sample_ids: sk.sample_ids.clone(),
    })
}

/// Writes `K.tsv` (with a sample-id header) and `K.eigen.tsv` (eigenvalues on
/// the first row, then one eigenvector per row in eigenvalue order).
pub fn write_kinship(dir: impl AsRef<Path>, sk: &SpectralKinship) -> Result<()> {
    let dir = dir.as_ref();
    let kpath = dir.join(KINSHIP_FILE);
    let epath = dir.join(EIGEN_FILE);
    let io = |path: &Path, r: std::io::Result<()>| r.map_err(|e| Error::io(path, e));
    let mut w = BufWriter::new(File::create(&kpath).map_err(|e| Error::io(&kpath, e))?);
    io(&kpath, (|| {
        write!(w, "sample_id")?;
        for s in &sk.sample_ids {
            write!(w, "\t{s}")?;
        }
        writeln!(w)?;
        for (i, s) in sk.sample_ids.iter().enumerate() {
            write!(w, "{s}")?;
            for j in 0..sk.n() {
                write!(w, "\t{}", fmt_f64(sk.k[(i, j)]))?;
            }
            writeln!(w)?;
        }
        w.flush()
    })())?;
    let mut w = BufWriter::new(File::create(&epath).map_err(|e| Error::io(&epath, e))?);
    io(&epath, (|| {
        write_row(&mut w, sk.eigvals.iter())?;
        for col in sk.eigvecs.column_iter() {
            write_row(&mut w, col.iter())?;
        }
        w.flush()
    })())
}

fn write_row<'a, W: Write>(w: &mut W, vals: impl Iterator<Item = &'a f64>) -> std::io::Result<()> {
    let line: Vec<String> = vals.map(|v| fmt_f64(*v)).collect();
    writeln!(w, "{}", line.join("\t"))
}

fn parse_row(line: &str, record: usize) -> Result<Vec<f64>> {
    line.split('\t')
        .map(|t| {
            t.trim().parse::<f64>().map_err(|_| Error::Parse {
                line: record,
                message: format!("`{t}` is not a number"),
            })
        })
        .collect()
}

/// Reads back the pair of files written by [`write_kinship`].
pub fn read_kinship(dir: impl AsRef<Path>) -> Result<SpectralKinship> {
    let dir = dir.as_ref();
    let kpath = dir.join(KINSHIP_FILE);
    let epath = dir.join(EIGEN_FILE);
    let lines = |path: &Path| -> Result<Vec<String>> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        BufReader::new(f)
            .lines()
            .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(path, e))
    };
    let klines = lines(&kpath)?;
    let (header, rows) = klines.split_first().ok_or(Error::EmptyInput)?;
    let sample_ids: Vec<String> = header.split('\t').skip(1).map(|s| s.trim().to_owned()).collect();
    let n = sample_ids.len();
    if rows.len() != n || n == 0 {
        return Err(Error::Dim(format!("{KINSHIP_FILE}: {n} samples in header, {} rows", rows.len())));
    }
    let mut k = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        let (id, rest) = row.split_once('\t').unwrap_or((row.as_str(), ""));
        if id.trim() != sample_ids[i] {
            return Err(Error::SampleMismatch(format!(
                "{KINSHIP_FILE} row {} is `{id}`, header says `{}`",
                i + 1,
                sample_ids[i]
            )));
        }
        let vals = parse_row(rest, i + 1)?;
        if vals.len() != n {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected {n} values, found {}", vals.len()),
            });
        }
        for (j, v) in vals.into_iter().enumerate() {
            k[(i, j)] = v;
        }
    }
    let elines = lines(&epath)?;
    if elines.len() != n + 1 {
        return Err(Error::Dim(format!("{EIGEN_FILE}: expected {} rows, found {}", n + 1, elines.len())));
    }
    let eigvals = DVector::from_vec(parse_row(&elines[0], 1)?);
    let mut eigvecs = DMatrix::zeros(n, n);
    for (c, line) in elines[1..].iter().enumerate() {
        let v = parse_row(line, c + 2)?;
        if v.len() != n {
            return Err(Error::Parse {
                line: c + 2,
                message: format!("expected {n} values, found {}", v.len()),
            });
        }
        eigvecs.set_column(c, &DVector::from_vec(v));
    }
    if eigvals.len() != n || eigvals.iter().any(|&r| !(r >= 0.0)) {
        return Err(Error::Parse {
            line: 1,
            message: "eigenvalues must be n nonnegative numbers".into(),
        });
    }
    Ok(SpectralKinship {
        k,
        eigvecs,
        eigvals,
        scale: 1.0,
        sample_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{read_genotypes, standardize};
    use crate::matstats::standard_normal_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("i{i}")).collect()
    }

    fn standardized(text: &str) -> GenotypeMatrix {
        standardize(&read_genotypes(text.as_bytes()).unwrap()).unwrap()
    }

    #[test]
    fn single_snp_rank_one() {
        let z = standardized("rs1 0 1 2 1 0\n");
        let sk = compute_kinship(&z).unwrap();
        let n = 5.0;
        assert!((sk.eigvals()[0] - n).abs() < 1e-12);
        assert!(sk.eigvals().iter().skip(1).all(|&r| r.abs() < 1e-12));
        assert!((sk.trace() - n).abs() < 1e-12);
    }

    #[test]
    fn two_snp_toy_matches_direct_product() {
        let z = standardized("rs1 0 2\nrs2 2 0\n");
        let sk = compute_kinship(&z).unwrap();
        // Brute-force Z^T Z / p.
        let zv = &z.values;
        for i in 0..2 {
            for j in 0..2 {
                let direct: f64 = (0..2).map(|s| zv[(s, i)] * zv[(s, j)]).sum::<f64>() / 2.0;
                assert!((sk.matrix()[(i, j)] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_individuals_share_kinship() {
        let z = standardized("rs1 0 1 1 2\nrs2 2 0 0 1\nrs3 1 2 2 0\n");
        let k = compute_kinship(&z).unwrap();
        let k = k.matrix();
        assert!((k[(1, 2)] - k[(1, 1)]).abs() < 1e-12);
        assert!((k[(1, 2)] - k[(2, 2)]).abs() < 1e-12);
    }

    #[test]
    fn rejects_unstandardized_input() {
        let g = read_genotypes("rs1 0 1 2\n".as_bytes()).unwrap();
        assert!(matches!(compute_kinship(&g), Err(Error::NotStandardized(_))));
    }

    #[test]
    fn spectral_invariants_on_random_genotypes() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let raw = standard_normal_matrix(30, 12, &mut rng);
        let g = GenotypeMatrix::new(raw, ids(30), ids(12)).unwrap();
        let z = standardize(&g).unwrap();
        let sk = compute_kinship(&z).unwrap();
        let n = sk.n();
        let k = sk.matrix();
        assert!((k - k.transpose()).amax() < 1e-10);
        assert!((sk.reconstruct() - k).norm() / k.norm() < 1e-8);
        let u = sk.eigvecs();
        assert!((u.transpose() * u - DMatrix::identity(n, n)).amax() < 1e-10);
        assert!(sk.eigvals().iter().all(|&r| r >= 0.0));
        assert!(sk.eigvals().as_slice().windows(2).all(|w| w[0] >= w[1]));
        assert!((sk.trace() - n as f64).abs() < 1e-6);
        for col in u.column_iter() {
            let first = col.iter().find(|x| x.abs() > 1e-12 * col.amax()).unwrap();
            assert!(*first > 0.0);
        }
    }

    #[test]
    fn blocked_accumulation_matches_single_product() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let p = SNP_BLOCK * 2 + 17;
        let raw = standard_normal_matrix(p, 6, &mut rng);
        let z = standardize(&GenotypeMatrix::new(raw, ids(p), ids(6)).unwrap()).unwrap();
        let sk = compute_kinship(&z).unwrap();
        let direct = z.values.transpose() * &z.values / p as f64;
        assert!((sk.matrix() - direct).amax() < 1e-12);
    }

    #[test]
    fn indefinite_matrix_aborts() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            SpectralKinship::from_matrix(k, ids(2)),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
    }

    #[test]
    fn rescaling() {
        let z = standardized("rs1 0 1 2 1\nrs2 1 0 2 2\n");
        let sk = compute_kinship(&z).unwrap();
        assert_eq!(rescale_kinship(&sk, 1.0).unwrap(), sk);
        let small = rescale_kinship(&sk, 0.003).unwrap();
        for (a, b) in small.eigvals().iter().zip(sk.eigvals().iter()) {
            assert_eq!(*a, b * 0.003);
        }
        assert_eq!(small.eigvecs(), sk.eigvecs());
        assert_eq!(small.scale(), 0.003);
        let ab = rescale_kinship(&rescale_kinship(&sk, 0.5).unwrap(), 3.0).unwrap();
        let once = rescale_kinship(&sk, 1.5).unwrap();
        assert!((ab.matrix() - once.matrix()).amax() < 1e-12);
        assert!((ab.eigvals() - once.eigvals()).amax() < 1e-12);
        assert!(matches!(rescale_kinship(&sk, 0.0), Err(Error::InvalidScale(_))));
        assert!(matches!(rescale_kinship(&sk, -1.0), Err(Error::InvalidScale(_))));
    }

    #[test]
    fn files_round_trip_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let raw = standard_normal_matrix(20, 7, &mut rng);
        let z = standardize(&GenotypeMatrix::new(raw, ids(20), ids(7)).unwrap()).unwrap();
        let sk = compute_kinship(&z).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_kinship(dir.path(), &sk).unwrap();
        let back = read_kinship(dir.path()).unwrap();
        assert_eq!(back, sk);
    }
}
