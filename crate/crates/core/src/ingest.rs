//! Genotype and phenotype inputs.
//!
//! Genotype files are whitespace-delimited text with one SNP per row,
//! `snp_id v1 ... vn`, dosages in `{0, 1, 2}` and `NA` for a missing call. An
//! optional header line starting with `#` (or with the literal first token
//! `snp_id`) names the samples; its first token labels the id column.
//!
//! Phenotype files are tab-separated: a header row `sample_id<TAB>trait...`,
//! then one row per sample. `NA` is the only missing marker.
//!
//! Standardization uses the population variance (divisor `n`), which makes the
//! kinship trace equal to the number of samples exactly.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fmt_f64;

pub const MISSING_TOKEN: &str = "NA";

/// `p x n` SNP dosage matrix. Masked entries hold `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenotypeMatrix {
    pub values: DMatrix<f64>,
    pub missing_mask: DMatrix<bool>,
    pub snp_ids: Vec<String>,
    pub sample_ids: Vec<String>,
}

impl GenotypeMatrix {
    pub fn new(values: DMatrix<f64>, snp_ids: Vec<String>, sample_ids: Vec<String>) -> Result<Self> {
        let (p, n) = values.shape();
        if snp_ids.len() != p || sample_ids.len() != n {
            return Err(Error::Dim(format!(
                "{p}x{n} genotypes with {} SNP ids and {} sample ids",
                snp_ids.len(),
                sample_ids.len()
            )));
        }
        let missing_mask = values.map(|v| v.is_nan());
        Ok(GenotypeMatrix {
            values,
            missing_mask,
            snp_ids,
            sample_ids,
        })
    }

    pub fn n_snps(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_missing(&self) -> usize {
        self.missing_mask.iter().filter(|&&m| m).count()
    }

    pub fn select_snps(&self, rows: &[usize]) -> GenotypeMatrix {
        GenotypeMatrix {
            values: self.values.select_rows(rows),
            missing_mask: self.missing_mask.select_rows(rows),
            snp_ids: rows.iter().map(|&i| self.snp_ids[i].clone()).collect(),
            sample_ids: self.sample_ids.clone(),
        }
    }

    fn observed(&self, row: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_samples())
            .filter(move |&j| !self.missing_mask[(row, j)])
            .map(move |j| self.values[(row, j)])
    }
}

/// `d x n` trait matrix. Masked entries hold `NaN`; `imputed` marks entries
/// that were filled in by prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PhenotypeMatrix {
    pub values: DMatrix<f64>,
    pub missing_mask: DMatrix<bool>,
    pub imputed: DMatrix<bool>,
    pub trait_ids: Vec<String>,
    pub sample_ids: Vec<String>,
}

impl PhenotypeMatrix {
    /// Builds from values where `NaN` marks a missing entry.
    pub fn new(values: DMatrix<f64>, trait_ids: Vec<String>, sample_ids: Vec<String>) -> Result<Self> {
        let (d, n) = values.shape();
        if trait_ids.len() != d || sample_ids.len() != n {
            return Err(Error::Dim(format!(
                "{d}x{n} phenotypes with {} trait ids and {} sample ids",
                trait_ids.len(),
                sample_ids.len()
            )));
        }
        check_unique(&sample_ids)?;
        let missing_mask = values.map(|v| v.is_nan());
        Ok(PhenotypeMatrix {
            imputed: DMatrix::from_element(d, n, false),
            values,
            missing_mask,
            trait_ids,
            sample_ids,
        })
    }

    pub fn n_traits(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_missing(&self) -> usize {
        self.missing_mask.iter().filter(|&&m| m).count()
    }

    /// Fraction of samples with no measurement, per trait.
    pub fn missingness(&self) -> Vec<f64> {
        let n = self.n_samples() as f64;
        self.missing_mask
            .row_iter()
            .map(|r| r.iter().filter(|&&m| m).count() as f64 / n)
            .collect()
    }

    /// Indices of samples with every trait observed.
    pub fn complete_samples(&self) -> Vec<usize> {
        (0..self.n_samples())
            .filter(|&j| self.missing_mask.column(j).iter().all(|&m| !m))
            .collect()
    }

    pub fn select_samples(&self, cols: &[usize]) -> PhenotypeMatrix {
        PhenotypeMatrix {
            values: self.values.select_columns(cols),
            missing_mask: self.missing_mask.select_columns(cols),
            imputed: self.imputed.select_columns(cols),
            trait_ids: self.trait_ids.clone(),
            sample_ids: cols.iter().map(|&j| self.sample_ids[j].clone()).collect(),
        }
    }

    /// Reorders samples to follow `order`, which must be a permutation of
    /// this matrix's sample ids.
    pub fn align_to(&self, order: &[String]) -> Result<PhenotypeMatrix> {
        if order.len() != self.n_samples() {
            return Err(Error::SampleMismatch(format!(
                "{} phenotyped samples, {} expected",
                self.n_samples(),
                order.len()
            )));
        }
        let index: std::collections::HashMap<&str, usize> = self
            .sample_ids
            .iter()
            .enumerate()
            .map(|(j, s)| (s.as_str(), j))
            .collect();
        let cols = order
            .iter()
            .map(|s| {
                index
                    .get(s.as_str())
                    .copied()
                    .ok_or_else(|| Error::SampleMismatch(format!("sample `{s}` has no phenotypes")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_samples(&cols))
    }
}

fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateSample(id.clone()));
        }
    }
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub fn load_genotypes(path: impl AsRef<Path>) -> Result<GenotypeMatrix> {
    let path = path.as_ref();
    read_genotypes(open(path)?).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

fn parse_dosage(tok: &str) -> Option<f64> {
    match tok {
        "0" => Some(0.0),
        "1" => Some(1.0),
        "2" => Some(2.0),
        MISSING_TOKEN => Some(f64::NAN),
        _ => None,
    }
}

/// Parses the genotype text format. Data records are numbered from 1 in error
/// messages, not counting the header.
pub fn read_genotypes<R: BufRead>(reader: R) -> Result<GenotypeMatrix> {
    let mut sample_ids: Option<Vec<String>> = None;
    let mut snp_ids = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let mut record = 0usize;
    let mut first_line = true;
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<genotypes>", e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if first_line {
            first_line = false;
            let header = trimmed.strip_prefix('#');
            let is_header = header.is_some() || trimmed.split_whitespace().next() == Some("snp_id");
            if is_header {
                let ids: Vec<String> = header
                    .unwrap_or(trimmed)
                    .split_whitespace()
                    .skip(1)
                    .map(str::to_owned)
                    .collect();
                check_unique(&ids)?;
                sample_ids = Some(ids);
                continue;
            }
        }
        record += 1;
        let mut toks = trimmed.split_whitespace();
        let id = toks.next().expect("nonempty line has a token");
        let start = data.len();
        for tok in toks {
            let v = parse_dosage(tok).ok_or_else(|| Error::Parse {
                line: record,
                message: format!("`{tok}` is not a dosage in {{0, 1, 2, NA}}"),
            })?;
            data.push(v);
        }
        let width = data.len() - start;
        let expected = sample_ids
            .get_or_insert_with(|| (1..=width).map(|j| format!("s{j}")).collect())
            .len();
        if width != expected {
            return Err(Error::Parse {
                line: record,
                message: format!("expected {expected} dosages, found {width}"),
            });
        }
        snp_ids.push(id.to_owned());
    }
    let sample_ids = sample_ids.unwrap_or_default();
    if snp_ids.is_empty() || sample_ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    let values = DMatrix::from_row_slice(snp_ids.len(), sample_ids.len(), &data);
    GenotypeMatrix::new(values, snp_ids, sample_ids)
}

pub fn save_genotypes(path: impl AsRef<Path>, g: &GenotypeMatrix) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_genotypes(BufWriter::new(file), g).map_err(|e| Error::io(path, e))
}

/// Writes raw dosages; values other than 0, 1, 2 or missing are rejected
/// because the format cannot hold them.
pub fn write_genotypes<W: Write>(mut w: W, g: &GenotypeMatrix) -> std::io::Result<()> {
    write!(w, "#snp_id")?;
    for s in &g.sample_ids {
        write!(w, "\t{s}")?;
    }
    writeln!(w)?;
    for (i, id) in g.snp_ids.iter().enumerate() {
        write!(w, "{id}")?;
        for j in 0..g.n_samples() {
            if g.missing_mask[(i, j)] {
                write!(w, "\t{MISSING_TOKEN}")?;
            } else {
                let v = g.values[(i, j)];
                if v != 0.0 && v != 1.0 && v != 2.0 {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("{id}: `{v}` is not a dosage"),
                    ));
                }
                write!(w, "\t{}", v as u8)?;
            }
        }
        writeln!(w)?;
    }
    w.flush()
}

/// Replaces masked dosages by the mean of the observed dosages of their SNP.
pub fn impute_genotype_means(g: &GenotypeMatrix) -> Result<GenotypeMatrix> {
    let degenerate: Vec<String> = (0..g.n_snps())
        .filter(|&i| g.missing_mask.row(i).iter().all(|&m| m))
        .map(|i| g.snp_ids[i].clone())
        .collect();
    if !degenerate.is_empty() {
        return Err(Error::DegenerateSnp { snp_ids: degenerate });
    }
    let mut out = g.clone();
    for i in 0..g.n_snps() {
        let (sum, count) = g.observed(i).fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        let mean = sum / count as f64;
        for j in 0..g.n_samples() {
            if g.missing_mask[(i, j)] {
                out.values[(i, j)] = mean;
                out.missing_mask[(i, j)] = false;
            }
        }
    }
    Ok(out)
}

/// Drops SNP rows that have no observations or no variation among observed
/// calls. Returns the retained matrix and the dropped ids.
pub fn drop_degenerate_snps(g: &GenotypeMatrix) -> (GenotypeMatrix, Vec<String>) {
    let mut keep = Vec::with_capacity(g.n_snps());
    let mut dropped = Vec::new();
    for i in 0..g.n_snps() {
        let mut obs = g.observed(i);
        let informative = match obs.next() {
            None => false,
            Some(first) => obs.any(|v| v != first),
        };
        if informative {
            keep.push(i);
        } else {
            dropped.push(g.snp_ids[i].clone());
        }
    }
    if !dropped.is_empty() {
        log::warn!(
            "dropping {} monomorphic or fully missing SNPs ({} retained)",
            dropped.len(),
            keep.len()
        );
    }
    (g.select_snps(&keep), dropped)
}

/// Centers each SNP row and scales it to unit population variance.
pub fn standardize(g: &GenotypeMatrix) -> Result<GenotypeMatrix> {
    let n_missing = g.n_missing();
    if n_missing > 0 {
        return Err(Error::MissingData(n_missing));
    }
    let n = g.n_samples() as f64;
    let mut out = g.clone();
    let mut degenerate = Vec::new();
    for (i, mut row) in out.values.row_iter_mut().enumerate() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            degenerate.push(g.snp_ids[i].clone());
            continue;
        }
        let sd = var.sqrt();
        row.apply(|v| *v = (*v - mean) / sd);
    }
    if !degenerate.is_empty() {
        return Err(Error::DegenerateSnp { snp_ids: degenerate });
    }
    Ok(out)
}

/// The usual genotype pipeline: drop uninformative SNPs, mean-impute, then
/// standardize. Returns the standardized matrix and the dropped SNP ids.
pub fn prepare_genotypes(g: &GenotypeMatrix) -> Result<(GenotypeMatrix, Vec<String>)> {
    let (kept, dropped) = drop_degenerate_snps(g);
    if kept.n_snps() == 0 {
        return Err(Error::DegenerateSnp { snp_ids: dropped });
    }
    let z = standardize(&impute_genotype_means(&kept)?)?;
    Ok((z, dropped))
}

pub fn load_phenotypes(path: impl AsRef<Path>) -> Result<PhenotypeMatrix> {
    let path = path.as_ref();
    read_phenotypes(open(path)?).map_err(|e| with_path(e, path))
}

/// Parses the phenotype TSV. Data records are numbered from 1 in error
/// messages, not counting the header.
pub fn read_phenotypes<R: BufRead>(reader: R) -> Result<PhenotypeMatrix> {
    let mut lines = reader.lines();
    let header = loop {
        match lines.next() {
            None => return Err(Error::EmptyInput),
            Some(line) => {
                let line = line.map_err(|e| Error::io("<phenotypes>", e))?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
        }
    };
    let trait_ids: Vec<String> = header
        .trim_end_matches(['\r', '\n'])
        .split('\t')
        .skip(1)
        .map(|s| s.trim().to_owned())
        .collect();
    if trait_ids.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "header names no traits".into(),
        });
    }
    let d = trait_ids.len();
    let mut sample_ids = Vec::new();
    let mut data = Vec::new();
    let mut record = 0usize;
    for line in lines {
        let line = line.map_err(|e| Error::io("<phenotypes>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        record += 1;
        let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
        if fields.len() != d + 1 {
            return Err(Error::Parse {
                line: record,
                message: format!("expected {} fields, found {}", d + 1, fields.len()),
            });
        }
        sample_ids.push(fields[0].trim().to_owned());
        for tok in &fields[1..] {
            let tok = tok.trim();
            let v = if tok == MISSING_TOKEN {
                f64::NAN
            } else {
                match tok.parse::<f64>() {
                    Ok(v) if v.is_finite() => v,
                    _ => {
                        return Err(Error::Parse {
                            line: record,
                            message: format!("`{tok}` is neither a number nor {MISSING_TOKEN}"),
                        })
                    }
                }
            };
            data.push(v);
        }
    }
    if sample_ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    let values = DMatrix::from_column_slice(d, sample_ids.len(), &data);
    PhenotypeMatrix::new(values, trait_ids, sample_ids)
}

pub fn save_phenotypes(path: impl AsRef<Path>, y: &PhenotypeMatrix) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_phenotypes(BufWriter::new(file), y).map_err(|e| Error::io(path, e))
}

pub fn write_phenotypes<W: Write>(mut w: W, y: &PhenotypeMatrix) -> std::io::Result<()> {
    write!(w, "sample_id")?;
    for t in &y.trait_ids {
        write!(w, "\t{t}")?;
    }
    writeln!(w)?;
    for (j, s) in y.sample_ids.iter().enumerate() {
        write!(w, "{s}")?;
        for i in 0..y.n_traits() {
            if y.missing_mask[(i, j)] {
                write!(w, "\t{MISSING_TOKEN}")?;
            } else {
                write!(w, "\t{}", fmt_f64(y.values[(i, j)]))?;
            }
        }
        writeln!(w)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geno(text: &str) -> Result<GenotypeMatrix> {
        read_genotypes(text.as_bytes())
    }

    #[test]
    fn reads_dosages_with_missing_call() {
        let g = geno("rs1 0 1 2\nrs2 1 1 NA\n").unwrap();
        assert_eq!((g.n_snps(), g.n_samples()), (2, 3));
        assert_eq!(g.n_missing(), 1);
        assert!(g.missing_mask[(1, 2)]);
        assert_eq!(g.values[(0, 2)], 2.0);
        assert_eq!(g.sample_ids, ["s1", "s2", "s3"]);
    }

    #[test]
    fn ragged_row_against_header() {
        let err = geno("#snp a b c\nrs1 0 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn non_dosage_token() {
        assert!(matches!(geno("rs1 0 1 3\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(geno("rs1 0 1 2\nrs2 0 0.5 1\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn empty_genotype_file() {
        assert!(matches!(geno(""), Err(Error::EmptyInput)));
        assert!(matches!(geno("#snp a b\n"), Err(Error::EmptyInput)));
    }

    #[test]
    fn mean_imputation() {
        let g = geno("rs1 0 2 NA\nrs2 1 1 1\n").unwrap();
        let imp = impute_genotype_means(&g).unwrap();
        assert_eq!(imp.values.row(0).iter().copied().collect::<Vec<_>>(), [0.0, 2.0, 1.0]);
        assert_eq!(imp.values.row(1).iter().copied().collect::<Vec<_>>(), [1.0, 1.0, 1.0]);
        assert_eq!(imp.n_missing(), 0);
        let all_na = geno("rs1 NA NA NA\n").unwrap();
        match impute_genotype_means(&all_na) {
            Err(Error::DegenerateSnp { snp_ids }) => assert_eq!(snp_ids, ["rs1"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn standardize_hand_values() {
        let g = geno("rs1 0 1 2 1\n").unwrap();
        let z = standardize(&g).unwrap();
        let s2 = 2f64.sqrt();
        let expected = [-s2, 0.0, s2, 0.0];
        for (a, b) in z.values.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn standardize_rejects_monomorphic_and_missing() {
        match standardize(&geno("rs1 0 1 2 1\nrs9 1 1 1 1\n").unwrap()) {
            Err(Error::DegenerateSnp { snp_ids }) => assert_eq!(snp_ids, ["rs9"]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            standardize(&geno("rs1 0 1 NA 1\n").unwrap()),
            Err(Error::MissingData(1))
        ));
    }

    #[test]
    fn prepare_drops_uninformative_rows() {
        let g = geno("rs1 0 1 2 1\nrs2 1 1 1 1\nrs3 NA NA NA NA\nrs4 2 NA 0 0\nrs5 1 NA 1 NA\n").unwrap();
        let (z, dropped) = prepare_genotypes(&g).unwrap();
        assert_eq!(dropped, ["rs2", "rs3", "rs5"]);
        assert_eq!(z.snp_ids, ["rs1", "rs4"]);
    }

    #[test]
    fn phenotypes_read_back() {
        let text = "sample_id\tt1\tt2\na\t1.5\t-0.25\nb\tNA\t2\nc\t0\t1e-3\nd\t3\t4\n";
        let y = read_phenotypes(text.as_bytes()).unwrap();
        assert_eq!((y.n_traits(), y.n_samples()), (2, 4));
        assert_eq!(y.n_missing(), 1);
        assert!(y.missing_mask[(0, 1)]);
        assert_eq!(y.values[(1, 2)], 1e-3);
        assert_eq!(y.missingness(), [0.25, 0.0]);
        assert_eq!(y.complete_samples(), [0, 2, 3]);
    }

    #[test]
    fn phenotype_errors() {
        let dup = "sample_id\tt1\na\t1\na\t2\n";
        assert!(matches!(read_phenotypes(dup.as_bytes()), Err(Error::DuplicateSample(s)) if s == "a"));
        let bad = "sample_id\tt1\na\t1\nb\tx\n";
        assert!(matches!(read_phenotypes(bad.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let empty = "sample_id\tt1\tt2\n";
        assert!(matches!(read_phenotypes(empty.as_bytes()), Err(Error::EmptyInput)));
    }

    #[test]
    fn align_reorders_and_detects_mismatch() {
        let y = read_phenotypes("sample_id\tt\na\t1\nb\t2\n".as_bytes()).unwrap();
        let z = y.align_to(&["b".into(), "a".into()]).unwrap();
        assert_eq!(z.values.as_slice(), &[2.0, 1.0]);
        assert!(matches!(y.align_to(&["b".into(), "c".into()]), Err(Error::SampleMismatch(_))));
    }
}
