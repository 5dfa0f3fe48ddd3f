use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

const CONFIG_HELP: &str = "\
Config file: one `key=value` per line, `#` starts a comment. Keys are the long
flag names of the chosen subcommand without the leading dashes, e.g.

    iter=35000
    burnin=10000
    wishart-scale=identity

A key with value `true` becomes a bare switch. Command-line flags override the
file.";

#[derive(Debug, Parser)]
#[command(name = "mvherit", version, about = "Multi-trait heritability with a Bayesian matrix-variate LMM", after_help = CONFIG_HELP)]
pub struct Cli {
    /// key=value defaults for the subcommand's flags
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Cap on worker threads (default: all cores)
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Standardize genotypes and build the kinship matrix with its eigendecomposition
    #[command(args_override_self = true, after_help = KINSHIP_HELP)]
    Kinship(KinshipArgs),
    /// Run the Gibbs sampler and write the retained draws
    #[command(args_override_self = true, after_help = FIT_HELP)]
    Fit(FitArgs),
    /// Summarize draws: heritabilities, covariance summaries, traces and densities
    #[command(args_override_self = true, after_help = HERIT_HELP)]
    Herit(HeritArgs),
    /// BLUP-impute missing phenotypes from a fitted model
    #[command(args_override_self = true, after_help = PREDICT_HELP)]
    Predict(PredictArgs),
    /// K-fold cross-validation of BLUP predictions
    #[command(args_override_self = true, after_help = CV_HELP)]
    Cv(CvArgs),
    /// Per-trait univariate maximum-likelihood baseline
    #[command(args_override_self = true, after_help = REML_HELP)]
    Reml(RemlArgs),
    /// Simulate the effect-size prior and check the ridge-regression covariance
    #[command(args_override_self = true, after_help = PRIORSIM_HELP)]
    Priorsim(PriorsimArgs),
    /// Simulate genotypes and phenotypes with known heritabilities
    #[command(args_override_self = true, after_help = SIMULATE_HELP)]
    Simulate(SimulateArgs),
    /// Rerun a command from its manifest.json
    #[command(after_help = REPLAY_HELP)]
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Kinship(_) => "kinship",
            Command::Fit(_) => "fit",
            Command::Herit(_) => "herit",
            Command::Predict(_) => "predict",
            Command::Cv(_) => "cv",
            Command::Reml(_) => "reml",
            Command::Priorsim(_) => "priorsim",
            Command::Simulate(_) => "simulate",
            Command::Replay(_) => "replay",
        }
    }
}

macro_rules! pheno_schema {
    () => {
        "

Phenotype file (TSV): header `sample_id<TAB>trait...`, then one row per sample.
`NA` marks a missing value. Covariate files use the same layout without
missing values; an intercept is always added."
    };
}

const KINSHIP_HELP: &str = "\
Inputs: see the genotype schema below. SNPs with missing calls are mean-imputed
and SNPs without variation are dropped before standardization.

Outputs in --out:
  K.tsv          n x n kinship, header `sample_id<TAB>ids...`, one row per sample
  K.eigen.tsv    first row eigenvalues (descending), then one eigenvector per row
  manifest.json  command, flags, seed, input digests, version, output digests

Genotype file: whitespace-separated text. An optional header line starting
with `#` (or with the token `snp_id`) names the samples; each further line is a
SNP id followed by one dosage (0, 1, 2 or NA) per sample.";

const FIT_HELP: &str = concat!("\
Inputs: --phenos (phenotype TSV), --kinship (directory written by `kinship`),
optional --covariates (TSV, same layout as phenotypes, no NA). Phenotyped
samples must all appear in the kinship; the kinship is restricted to them.

Outputs in --out:
  draws_chainC.csv    one per chain: `iter,sigma_g_11,sigma_g_12,...,sigma_e_dd,beta_<trait>_<cov>...`
                      (upper triangle of each covariance, row by row)
  draws.meta          key=value sampler settings needed to read the draws back
  model.json          posterior means of Sigma, Sigma_e and beta plus the trait,
                      covariate and kinship references used by `predict`
  phenotypes_used.tsv the phenotypes the sampler saw (imputed values filled in)
  manifest.json

Missing phenotypes: `--missing drop` removes incomplete samples; `--missing blup`
fits the complete samples first, BLUP-imputes the gaps and refits everyone.
--wishart-scale is `identity` or a path to a whitespace-separated d x d matrix.", pheno_schema!());

const HERIT_HELP: &str = "\
Input: --draws, a directory written by `fit`.

Outputs in --out:
  heritability.tsv  trait, mean, sd, naive_se, ts_se, q2.5, q97.5
  summary.tsv       parameter, mean, sd, naive_se, ts_se, q2.5, q25, q50, q75,
                    q97.5, ess, psrf for every covariance entry and heritability
                    (psrf is NA with a single chain)
  traces/trace_<param>.csv    chain,iter,value
  traces/density_<param>.csv  grid,chain_1,...   kernel density per chain
  manifest.json";

const PREDICT_HELP: &str = concat!("\
Inputs: --model (a `fit` output directory), --phenos (phenotype TSV with NA
gaps). The kinship and covariates recorded in model.json are used unless
--kinship / --covariates are given.

Output: --out, a phenotype TSV with every NA replaced by its BLUP, plus
<out>.manifest.json beside it.", pheno_schema!());

const CV_HELP: &str = concat!("\
Inputs as for `fit`. --estimator and --impute take comma-separated lists; every
combination is run.

Outputs in --out:
  cv_report.tsv   estimator, impute, metric (RMSE or Corr, NA when undefined),
                  then one column per trait
  folds_<estimator>_<impute>.tsv   sample_id, fold (NA for dropped samples)
  manifest.json", pheno_schema!());

const REML_HELP: &str = concat!("\
Inputs as for `fit`. Each trait is fit on the samples where it is observed.

Output: --out, a TSV with columns trait, h2, se, sigma_g2, sigma_e2, loglik,
flags (`boundary`, `se_undefined`, `non_identifiable` or `-`), plus
<out>.manifest.json beside it.", pheno_schema!());

const PRIORSIM_HELP: &str = "\
Outputs in --out:
  effect_hist.tsv  bin_center, density: pooled effect sizes on [-5, 5], 0.01 bins
  effect_moments.tsv  trait, second_moment, second_moment_se, kurtosis
  ridge_check.tsv  variant, max_dev, mc_se, max_z, pass: Monte Carlo covariance
                   of genetic values against the analytic ridge covariance,
                   unscaled and scaled by --sigma2-beta
  manifest.json";

const SIMULATE_HELP: &str = "\
Outputs in --out:
  genotypes.txt    dosages in the genotype schema read by `kinship`
  phenotypes.tsv   phenotype TSV with the requested MCAR gaps
  truth.json       Sigma, Sigma_e, beta and the simulation settings
  manifest.json
Sigma and Sigma_e follow from --h2 and --rg with unit total variance per trait.";

const REPLAY_HELP: &str = "\
Reruns the recorded command line. Fails if any recorded input no longer matches
its digest, and reports whether the regenerated outputs match the recorded ones.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MissingArg {
    Drop,
    Blup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Bayes,
    Reml,
}

#[derive(Debug, Args)]
pub struct KinshipArgs {
    #[arg(long, value_name = "FILE")]
    pub genotypes: PathBuf,
    /// Multiply the kinship by this factor (per-SNP effect variance times p)
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, value_name = "FILE")]
    pub phenos: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub kinship: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub covariates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 3)]
    pub chains: usize,
    #[arg(long, default_value_t = 35_000)]
    pub iter: usize,
    #[arg(long, default_value_t = 10_000)]
    pub burnin: usize,
    #[arg(long, default_value_t = 5)]
    pub thin: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// `identity` or a path to a d x d matrix
    #[arg(long, default_value = "identity")]
    pub wishart_scale: String,
    /// Wishart degrees of freedom (default: number of traits)
    #[arg(long)]
    pub wishart_dof: Option<f64>,
    /// Prior variance of each regression coefficient
    #[arg(long, default_value_t = 1e4)]
    pub coef_prior_variance: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, value_enum, default_value = "blup")]
    pub missing: MissingArg,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeritArgs {
    #[arg(long, value_name = "DIR")]
    pub draws: PathBuf,
    /// Skip the per-parameter trace and density files
    #[arg(long)]
    pub no_traces: bool,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "DIR")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub phenos: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub kinship: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub covariates: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "reml")]
    pub estimator: Vec<EstimatorArg>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "blup")]
    pub impute: Vec<MissingArg>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RemlArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PriorsimArgs {
    /// Per-SNP effect variance
    #[arg(long, default_value_t = 1.0)]
    pub sigma2_beta: f64,
    /// Wishart degrees of freedom (default: --d)
    #[arg(long)]
    pub dof: Option<f64>,
    /// `identity` or a path to a d x d matrix
    #[arg(long, default_value = "identity")]
    pub wishart_scale: String,
    /// Number of effect matrices to draw
    #[arg(long, default_value_t = 100_000)]
    pub draws: usize,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    /// SNPs per effect matrix
    #[arg(long, default_value_t = 100)]
    pub p: usize,
    #[arg(long, default_value_t = 10)]
    pub ridge_n: usize,
    #[arg(long, default_value_t = 50)]
    pub ridge_p: usize,
    #[arg(long, default_value_t = 100_000)]
    pub ridge_draws: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub p: usize,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    /// Per-trait heritabilities, comma-separated (one value is recycled)
    #[arg(long, value_delimiter = ',', required = true)]
    pub h2: Vec<f64>,
    /// Genetic correlation between every pair of traits
    #[arg(long, default_value_t = 0.0)]
    pub rg: f64,
    /// Per-trait MCAR fractions, comma-separated (one value is recycled)
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub miss: Vec<f64>,
    /// Minor allele frequency range `low,high`
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.5")]
    pub maf: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}
