use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use mvherit_core::gibbs::{intercept, read_draws, run_chains, write_draws, GibbsConfig, Parameter, WishartScaleMode};
use mvherit_core::ingest::{load_genotypes, load_phenotypes, prepare_genotypes, save_genotypes, save_phenotypes, PhenotypeMatrix};
use mvherit_core::kinship::{compute_kinship, read_kinship, rescale_kinship, write_kinship, SpectralKinship};
use mvherit_core::matstats::{SpdMatrix, WishartPrior};
use mvherit_core::posterior::{export_traces, heritability, summarize, write_heritability_tsv, write_summary_tsv};
use mvherit_core::predict::{cross_validate, impute_phenotypes, BlupModel, CvConfig, Estimator, ImputePolicy};
use mvherit_core::priorsim::{sample_effect_prior, verify_ridge_equivalence, EffectSizePriorSpec};
use mvherit_core::reml::univariate_ml_all;
use mvherit_core::simulate::{covariances_from_h2, mask_at_random, simulate_genotypes, simulate_phenotypes};
use mvherit_core::{fmt_f64, Error};

use crate::args::*;
use crate::manifest::{self, Manifest, OutputSpec};

pub const MODEL_FILE: &str = "model.json";

/// What a finished command hands back for its manifest.
pub struct Run<'a> {
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub output: OutputSpec<'a>,
}

pub fn write_manifest(command: &str, args: &[String], run: &Run) -> Result<PathBuf> {
    let inputs: Vec<&Path> = run.inputs.iter().map(PathBuf::as_path).collect();
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME").to_owned(),
        version: env!("CARGO_PKG_VERSION").to_owned(),
        command: command.to_owned(),
        args: args.to_vec(),
        seed: run.seed,
        inputs: manifest::input_digests(&inputs)?,
        outputs: manifest::output_digests(&run.output)?,
    };
    let path = run.output.manifest_path();
    manifest::write(&path, &m)?;
    Ok(path)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn na(v: f64) -> String {
    if v.is_finite() {
        fmt_f64(v)
    } else {
        "NA".into()
    }
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for line in lines {
        writeln!(w, "{line}")?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    ensure!(rows.iter().all(|row| row.len() == c), "ragged matrix");
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Whitespace-separated square matrix, one row per line.
fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(|t| t.parse::<f64>()).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("{}: not a numeric matrix", path.display()))?;
    from_rows(&rows).with_context(|| path.display().to_string())
}

fn scale_matrix(arg: &str, inputs: &mut Vec<PathBuf>) -> Result<Option<DMatrix<f64>>> {
    if arg == "identity" {
        return Ok(None);
    }
    let path = PathBuf::from(arg);
    let m = read_matrix(&path)?;
    inputs.push(path);
    Ok(Some(m))
}

fn gibbs_config(s: &SamplerArgs, inputs: &mut Vec<PathBuf>) -> Result<GibbsConfig> {
    let wishart_scale_mode = match scale_matrix(&s.wishart_scale, inputs)? {
        None => WishartScaleMode::Identity,
        Some(m) => WishartScaleMode::UserMatrix(m),
    };
    Ok(GibbsConfig {
        n_chains: s.chains,
        n_iter: s.iter,
        burn_in: s.burnin,
        thin: s.thin,
        seed: s.seed,
        wishart_scale_mode,
        wishart_dof: s.wishart_dof,
        coef_prior_variance: s.coef_prior_variance,
    })
}

/// Kinship restricted to and ordered like `ids`.
fn kinship_for(dir: &Path, ids: &[String]) -> Result<SpectralKinship> {
    let sk = read_kinship(dir)?;
    let idx = sk.positions_of(ids)?;
    if idx.len() == sk.n() && idx.iter().enumerate().all(|(a, &b)| a == b) {
        Ok(sk)
    } else {
        Ok(sk.subset(&idx)?)
    }
}

/// Intercept plus the covariate file's columns for `ids`.
fn design_for(covariates: Option<&Path>, ids: &[String]) -> Result<(DMatrix<f64>, Vec<String>)> {
    let mut names = vec!["intercept".to_owned()];
    let Some(path) = covariates else {
        return Ok((intercept(ids.len()), names));
    };
    let cov = load_phenotypes(path)?;
    if cov.n_missing() > 0 {
        return Err(Error::MissingData(cov.n_missing()))
            .with_context(|| format!("covariates in {} must be complete", path.display()));
    }
    let index: std::collections::HashMap<&str, usize> =
        cov.sample_ids.iter().enumerate().map(|(j, s)| (s.as_str(), j)).collect();
    let cols = ids
        .iter()
        .map(|s| {
            index
                .get(s.as_str())
                .copied()
                .ok_or_else(|| Error::SampleMismatch(format!("sample `{s}` has no covariates")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let k = cov.n_traits();
    let x = DMatrix::from_fn(k + 1, ids.len(), |l, j| if l == 0 { 1.0 } else { cov.values[(l - 1, cols[j])] });
    names.extend(cov.trait_ids);
    Ok((x, names))
}

struct Data {
    y: PhenotypeMatrix,
    x: DMatrix<f64>,
    sk: SpectralKinship,
    covariate_ids: Vec<String>,
}

fn load_data(a: &DataArgs, inputs: &mut Vec<PathBuf>) -> Result<Data> {
    let y = load_phenotypes(&a.phenos)?;
    let sk = kinship_for(&a.kinship, &y.sample_ids)?;
    let (x, covariate_ids) = design_for(a.covariates.as_deref(), &y.sample_ids)?;
    inputs.push(a.phenos.clone());
    inputs.push(a.kinship.clone());
    inputs.extend(a.covariates.clone());
    Ok(Data { y, x, sk, covariate_ids })
}

pub fn kinship(a: &KinshipArgs) -> Result<Run<'_>> {
    let g = load_genotypes(&a.genotypes)?;
    let (z, dropped) = prepare_genotypes(&g)?;
    if !dropped.is_empty() {
        log::warn!("dropped {} SNPs without variation", dropped.len());
    }
    let mut sk = compute_kinship(&z)?;
    if a.scale != 1.0 {
        sk = rescale_kinship(&sk, a.scale)?;
    }
    create_dir(&a.out)?;
    write_kinship(&a.out, &sk)?;
    log::info!("kinship for {} samples from {} SNPs", sk.n(), z.n_snps());
    Ok(Run {
        seed: None,
        inputs: vec![a.genotypes.clone()],
        output: OutputSpec::Dir(&a.out),
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub trait_ids: Vec<String>,
    pub covariate_ids: Vec<String>,
    pub sigma_g: Vec<Vec<f64>>,
    pub sigma_e: Vec<Vec<f64>>,
    /// traits x covariates
    pub beta: Vec<Vec<f64>>,
    pub kinship: PathBuf,
    pub covariates: Option<PathBuf>,
    pub n_samples: usize,
}

pub fn fit(a: &FitArgs) -> Result<Run<'_>> {
    let mut inputs = Vec::new();
    let data = load_data(&a.data, &mut inputs)?;
    let config = gibbs_config(&a.sampler, &mut inputs)?;
    config.validate(data.y.n_traits())?;
    let (y, x, sk) = if data.y.n_missing() == 0 {
        (data.y, data.x, data.sk)
    } else {
        let complete = data.y.complete_samples();
        log::info!(
            "{} of {} samples are incomplete; policy {:?}",
            data.y.n_samples() - complete.len(),
            data.y.n_samples(),
            a.missing
        );
        let y_c = data.y.select_samples(&complete);
        let x_c = data.x.select_columns(&complete);
        let sk_c = data.sk.subset(&complete)?;
        match a.missing {
            MissingArg::Drop => (y_c, x_c, sk_c),
            MissingArg::Blup => {
                let prelim = run_chains(&y_c, &x_c, &sk_c, &config)?.posterior_means();
                let model = BlupModel::new(
                    SpdMatrix::new(prelim.sigma_g)?,
                    SpdMatrix::new(prelim.sigma_e)?,
                    prelim.beta,
                    data.x.clone(),
                    data.sk.clone(),
                )?;
                (impute_phenotypes(&model, &data.y)?, data.x, data.sk)
            }
        }
    };
    let draws = run_chains(&y, &x, &sk, &config)?;
    create_dir(&a.out)?;
    write_draws(&a.out, &draws)?;
    save_phenotypes(a.out.join("phenotypes_used.tsv"), &y)?;
    let means = draws.posterior_means();
    let model = ModelFile {
        trait_ids: y.trait_ids.clone(),
        covariate_ids: data.covariate_ids,
        sigma_g: rows_of(&means.sigma_g),
        sigma_e: rows_of(&means.sigma_e),
        beta: rows_of(&means.beta),
        kinship: a.data.kinship.clone(),
        covariates: a.data.covariates.clone(),
        n_samples: y.n_samples(),
    };
    fs::write(a.out.join(MODEL_FILE), serde_json::to_string_pretty(&model)? + "\n")?;
    Ok(Run {
        seed: Some(config.seed),
        inputs,
        output: OutputSpec::Dir(&a.out),
    })
}

pub fn herit(a: &HeritArgs) -> Result<Run<'_>> {
    let draws = read_draws(&a.draws)?;
    let d = draws.n_traits();
    let h = heritability(&draws)?;
    create_dir(&a.out)?;
    write_heritability_tsv(a.out.join("heritability.tsv"), &draws.trait_ids, &h)?;
    let mut rows = Parameter::covariance_entries(d)
        .into_iter()
        .map(|p| Ok((p.name(d), summarize(&draws, p)?)))
        .collect::<Result<Vec<_>>>()?;
    rows.extend((0..d).map(|i| (Parameter::Heritability(i).name(d), h.summaries[i].clone())));
    write_summary_tsv(a.out.join("summary.tsv"), &rows)?;
    if !a.no_traces {
        export_traces(&draws, a.out.join("traces"))?;
    }
    Ok(Run {
        seed: None,
        inputs: vec![a.draws.clone()],
        output: OutputSpec::Dir(&a.out),
    })
}

pub fn predict(a: &PredictArgs) -> Result<Run<'_>> {
    let model_path = a.model.join(MODEL_FILE);
    let text = fs::read_to_string(&model_path).with_context(|| format!("reading {}", model_path.display()))?;
    let m: ModelFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", model_path.display()))?;
    let y = load_phenotypes(&a.phenos)?;
    if y.trait_ids != m.trait_ids {
        return Err(Error::SampleMismatch(format!(
            "phenotype traits {:?} differ from the model's {:?}",
            y.trait_ids, m.trait_ids
        ))
        .into());
    }
    let kin = a.kinship.clone().unwrap_or_else(|| m.kinship.clone());
    let cov = a.covariates.clone().or_else(|| m.covariates.clone());
    let sk = kinship_for(&kin, &y.sample_ids)?;
    let (x, names) = design_for(cov.as_deref(), &y.sample_ids)?;
    if names != m.covariate_ids {
        return Err(Error::Dim(format!("covariates {names:?} differ from the model's {:?}", m.covariate_ids)).into());
    }
    let model = BlupModel::new(
        SpdMatrix::new(from_rows(&m.sigma_g)?)?,
        SpdMatrix::new(from_rows(&m.sigma_e)?)?,
        from_rows(&m.beta)?,
        x,
        sk,
    )?;
    let filled = impute_phenotypes(&model, &y)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_phenotypes(&a.out, &filled)?;
    log::info!("imputed {} entries", y.n_missing());
    let mut inputs = vec![model_path, a.phenos.clone(), kin];
    inputs.extend(cov);
    Ok(Run {
        seed: None,
        inputs,
        output: OutputSpec::File(&a.out),
    })
}

fn estimator_name(e: EstimatorArg) -> &'static str {
    match e {
        EstimatorArg::Bayes => "bayes",
        EstimatorArg::Reml => "reml",
    }
}

fn policy_name(p: MissingArg) -> &'static str {
    match p {
        MissingArg::Drop => "drop",
        MissingArg::Blup => "blup",
    }
}

pub fn cv(a: &CvArgs) -> Result<Run<'_>> {
    let mut inputs = Vec::new();
    let data = load_data(&a.data, &mut inputs)?;
    let gibbs = gibbs_config(&a.sampler, &mut inputs)?;
    if a.estimator.contains(&EstimatorArg::Bayes) {
        gibbs.validate(data.y.n_traits())?;
    }
    create_dir(&a.out)?;
    let mut report = vec![format!("estimator\timpute\tmetric\t{}", data.y.trait_ids.join("\t"))];
    for &est in &a.estimator {
        for &imp in &a.impute {
            let config = CvConfig {
                folds: a.folds,
                estimator: match est {
                    EstimatorArg::Bayes => Estimator::Bayes,
                    EstimatorArg::Reml => Estimator::Reml,
                },
                impute: match imp {
                    MissingArg::Drop => ImputePolicy::Drop,
                    MissingArg::Blup => ImputePolicy::Blup,
                },
                seed: a.sampler.seed,
                gibbs: gibbs.clone(),
            };
            let r = cross_validate(&data.y, &data.x, &data.sk, &config)?;
            let (e, p) = (estimator_name(est), policy_name(imp));
            let rmse: Vec<String> = r.rmse.iter().map(|v| na(*v)).collect();
            let corr: Vec<String> = r
                .corr
                .iter()
                .zip(&r.corr_undefined)
                .map(|(v, undef)| if *undef { "NA".into() } else { na(*v) })
                .collect();
            report.push(format!("{e}\t{p}\tRMSE\t{}", rmse.join("\t")));
            report.push(format!("{e}\t{p}\tCorr\t{}", corr.join("\t")));
            let folds = std::iter::once("sample_id\tfold".to_owned()).chain(
                data.y
                    .sample_ids
                    .iter()
                    .zip(&r.fold_of)
                    .map(|(s, f)| format!("{s}\t{}", f.map_or("NA".into(), |f| (f + 1).to_string()))),
            );
            write_lines(&a.out.join(format!("folds_{e}_{p}.tsv")), folds)?;
        }
    }
    write_lines(&a.out.join("cv_report.tsv"), report)?;
    Ok(Run {
        seed: Some(a.sampler.seed),
        inputs,
        output: OutputSpec::Dir(&a.out),
    })
}

pub fn reml(a: &RemlArgs) -> Result<Run<'_>> {
    let mut inputs = Vec::new();
    let data = load_data(&a.data, &mut inputs)?;
    let fits = univariate_ml_all(&data.y, &data.x, &data.sk);
    let mut lines = vec!["trait\th2\tse\tsigma_g2\tsigma_e2\tloglik\tflags".to_owned()];
    for (t, fit) in data.y.trait_ids.iter().zip(fits) {
        match fit {
            Ok(f) => {
                let mut flags = Vec::new();
                if f.boundary {
                    flags.push("boundary");
                }
                if !f.se_h2.is_finite() {
                    flags.push("se_undefined");
                }
                let flags = if flags.is_empty() { "-".to_owned() } else { flags.join(",") };
                lines.push(format!(
                    "{t}\t{}\t{}\t{}\t{}\t{}\t{flags}",
                    na(f.h2),
                    na(f.se_h2),
                    na(f.sigma_g2),
                    na(f.sigma_e2),
                    na(f.loglik)
                ));
            }
            Err(Error::NonIdentifiable) => {
                log::warn!("trait {t}: variance components are not identifiable");
                lines.push(format!("{t}\tNA\tNA\tNA\tNA\tNA\tnon_identifiable"));
            }
            Err(e) => return Err(e).with_context(|| format!("trait {t}")),
        }
    }
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_lines(&a.out, lines)?;
    Ok(Run {
        seed: None,
        inputs,
        output: OutputSpec::File(&a.out),
    })
}

pub fn priorsim(a: &PriorsimArgs) -> Result<Run<'_>> {
    let mut inputs = Vec::new();
    let scale = match scale_matrix(&a.wishart_scale, &mut inputs)? {
        None => SpdMatrix::identity(a.d),
        Some(m) => {
            ensure!(m.nrows() == a.d, "Wishart scale is {}x{} but --d is {}", m.nrows(), m.ncols(), a.d);
            SpdMatrix::new(m)?
        }
    };
    let wishart = WishartPrior::new(scale, a.dof.unwrap_or(a.d as f64))?;
    let spec = EffectSizePriorSpec::new(wishart, a.sigma2_beta, a.p)?;
    let sample = sample_effect_prior(&spec, a.draws, a.seed)?;
    create_dir(&a.out)?;
    let hist = &sample.histogram;
    let dens = hist.densities();
    write_lines(
        &a.out.join("effect_hist.tsv"),
        std::iter::once("bin_center\tdensity".to_owned())
            .chain(dens.iter().enumerate().map(|(i, v)| format!("{}\t{}", fmt_f64(hist.bin_center(i)), fmt_f64(*v)))),
    )?;
    write_lines(
        &a.out.join("effect_moments.tsv"),
        std::iter::once("trait\tsecond_moment\tsecond_moment_se\tkurtosis".to_owned()).chain((0..a.d).map(|i| {
            format!(
                "{}\t{}\t{}\t{}",
                i + 1,
                na(sample.second_moment[(i, i)]),
                na(sample.second_moment_se[(i, i)]),
                na(sample.kurtosis[i])
            )
        })),
    )?;

    // ridge check on standardized simulated genotypes; Z^t Z = p K exactly
    let mut rng = ChaCha20Rng::seed_from_u64(a.seed);
    let g = simulate_genotypes(a.ridge_n, a.ridge_p, (0.05, 0.5), &mut rng)?;
    let (z, _) = prepare_genotypes(&g.genotypes)?;
    let sigma_beta = SpdMatrix::identity(a.d);
    let mut lines = vec!["variant\tmax_dev\tmc_se\tmax_z\tpass".to_owned()];
    for (variant, s2) in [("unscaled", 1.0), ("scaled", a.sigma2_beta)] {
        let r = verify_ridge_equivalence(&z, &sigma_beta, s2, a.ridge_draws, a.seed)?;
        if !r.pass {
            log::warn!("ridge check ({variant}) failed: max z = {}", r.max_z);
        }
        lines.push(format!(
            "{variant}\t{}\t{}\t{}\t{}",
            fmt_f64(r.max_dev),
            fmt_f64(r.mc_se),
            na(r.max_z),
            r.pass
        ));
    }
    write_lines(&a.out.join("ridge_check.tsv"), lines)?;
    Ok(Run {
        seed: Some(a.seed),
        inputs,
        output: OutputSpec::Dir(&a.out),
    })
}

/// Extends a single value to `d` entries; otherwise requires exactly `d`.
fn per_trait(name: &str, v: &[f64], d: usize) -> Result<Vec<f64>> {
    match v.len() {
        1 => Ok(vec![v[0]; d]),
        n if n == d => Ok(v.to_vec()),
        n => bail!("--{name} has {n} values for {d} traits"),
    }
}

#[derive(Serialize)]
struct Truth {
    n: usize,
    p: usize,
    d: usize,
    h2: Vec<f64>,
    rg: f64,
    miss: Vec<f64>,
    maf: (f64, f64),
    seed: u64,
    sigma_g: Vec<Vec<f64>>,
    sigma_e: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    resampled_snps: usize,
}

pub fn simulate(a: &SimulateArgs) -> Result<Run<'_>> {
    ensure!(a.d >= 1, "--d must be at least 1");
    let h2 = per_trait("h2", &a.h2, a.d)?;
    let miss = per_trait("miss", &a.miss, a.d)?;
    ensure!(a.maf.len() == 2, "--maf takes `low,high`");
    let maf = (a.maf[0], a.maf[1]);
    let (sg, se) = covariances_from_h2(&h2, a.rg)?;
    let mut rng = ChaCha20Rng::seed_from_u64(a.seed);
    let g = simulate_genotypes(a.n, a.p, maf, &mut rng)?;
    let (z, _) = prepare_genotypes(&g.genotypes)?;
    let sk = compute_kinship(&z)?;
    let beta = DMatrix::zeros(a.d, 1);
    let y = simulate_phenotypes(&sk, &sg, &se, &beta, &intercept(a.n), &mut rng)?;
    let y = mask_at_random(&y, &miss, &mut rng)?;
    create_dir(&a.out)?;
    save_genotypes(a.out.join("genotypes.txt"), &g.genotypes)?;
    save_phenotypes(a.out.join("phenotypes.tsv"), &y)?;
    let truth = Truth {
        n: a.n,
        p: a.p,
        d: a.d,
        h2,
        rg: a.rg,
        miss,
        maf,
        seed: a.seed,
        sigma_g: rows_of(sg.matrix()),
        sigma_e: rows_of(se.matrix()),
        beta: rows_of(&beta),
        resampled_snps: g.resampled,
    };
    fs::write(a.out.join("truth.json"), serde_json::to_string_pretty(&truth)? + "\n")?;
    Ok(Run {
        seed: Some(a.seed),
        inputs: Vec::new(),
        output: OutputSpec::Dir(&a.out),
    })
}
