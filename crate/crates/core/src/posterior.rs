//! Posterior summaries, Monte Carlo standard errors and convergence checks.
//!
//! Means, standard deviations and quantiles pool all chains. The time-series
//! standard error averages each chain's spectral density at frequency zero,
//! `ts_se = sqrt(mean_c S_c(0) / N)`, where `S_c(0)` comes from an
//! autoregressive fit with AIC-selected order. Quantiles interpolate order
//! statistics linearly (the "type 7" rule).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::gibbs::{Parameter, PosteriorDraws};

pub const QUANTILE_PROBS: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];
pub const MIN_SUMMARY_DRAWS: usize = 100;
pub const DENSITY_GRID_POINTS: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSummary {
    pub mean: f64,
    pub sd: f64,
    /// `sd / sqrt(N)`, ignoring autocorrelation.
    pub naive_se: f64,
    pub timeseries_se: f64,
    /// At [`QUANTILE_PROBS`].
    pub quantiles: [f64; 5],
    /// Effective sample size, capped at the number of draws.
    pub ess: f64,
    /// Potential scale reduction; `None` for a single chain.
    pub psrf: Option<f64>,
    pub n_draws: usize,
}

/// Two-pass mean; exact for constant input.
fn mean(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    m + xs.iter().map(|x| x - m).sum::<f64>() / n
}

/// Linear interpolation between order statistics at `h = (n - 1) p`.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Yule-Walker autoregressive fit by Levinson-Durbin recursion. Returns the
/// AIC-selected order, its coefficients and the innovation variance.
fn fit_ar(x: &[f64], max_order: usize) -> (usize, Vec<f64>, f64) {
    let n = x.len();
    let m = mean(x);
    let acov: Vec<f64> = (0..=max_order)
        .map(|lag| (0..n - lag).map(|t| (x[t] - m) * (x[t + lag] - m)).sum::<f64>() / n as f64)
        .collect();
    let mut best = (0usize, Vec::new(), acov[0]);
    let mut best_aic = n as f64 * acov[0].ln();
    let mut phi: Vec<f64> = Vec::new();
    let mut var = acov[0];
    for order in 1..=max_order {
        let acc: f64 = (1..order).map(|j| phi[j - 1] * acov[order - j]).sum();
        let kappa = (acov[order] - acc) / var;
        let mut next = vec![0.0; order];
        for j in 1..order {
            next[j - 1] = phi[j - 1] - kappa * phi[order - j - 1];
        }
        next[order - 1] = kappa;
        phi = next;
        var *= 1.0 - kappa * kappa;
        if !(var > 0.0) {
            break;
        }
        let aic = n as f64 * var.ln() + 2.0 * order as f64;
        if aic < best_aic {
            best_aic = aic;
            best = (order, phi.clone(), var);
        }
    }
    let (order, coefs, var) = best;
    // small-sample correction applied to the innovation variance of the chosen order
    let var = var * n as f64 / (n - (order + 1)) as f64;
    (order, coefs, var)
}

/// Spectral density at frequency zero from an AR fit:
/// `sigma^2 / (1 - sum phi)^2`. Zero for a constant series.
pub fn spectrum0_ar(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 3 {
        return 0.0;
    }
    let m = mean(x);
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
    if var == 0.0 || var.sqrt() <= 1e-12 * m.abs() {
        return 0.0;
    }
    let max_order = ((10.0 * (n as f64).log10()).floor() as usize).min(n - 2);
    let (_, phi, sigma2) = fit_ar(x, max_order);
    let denom = 1.0 - phi.iter().sum::<f64>();
    sigma2 / (denom * denom)
}

/// Batch-means standard error of the pooled mean, batch length `floor(sqrt(n))`.
pub fn batch_means_se(chains: &[Vec<f64>]) -> f64 {
    let total: usize = chains.iter().map(Vec::len).sum();
    let spectra: Vec<f64> = chains
        .iter()
        .map(|c| {
            let b = (c.len() as f64).sqrt().floor().max(1.0) as usize;
            let batches: Vec<f64> = c.chunks_exact(b).map(mean).collect();
            if batches.len() < 2 {
                return 0.0;
            }
            let bm = mean(&batches);
            b as f64 * batches.iter().map(|v| (v - bm).powi(2)).sum::<f64>() / (batches.len() - 1) as f64
        })
        .collect();
    (mean(&spectra) / total as f64).sqrt()
}

/// Summarizes per-chain series of one scalar parameter.
pub fn summarize_chains(chains: &[Vec<f64>]) -> Result<ParameterSummary> {
    let total: usize = chains.iter().map(Vec::len).sum();
    if total < MIN_SUMMARY_DRAWS {
        return Err(Error::InsufficientSamples {
            needed: MIN_SUMMARY_DRAWS,
            got: total,
        });
    }
    let mut pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let mu = mean(&pooled);
    let var = pooled.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (total - 1) as f64;
    let sd = var.sqrt();
    pooled.sort_by(f64::total_cmp);
    let quantiles = QUANTILE_PROBS.map(|p| quantile_type7(&pooled, p));
    let spectra: Vec<f64> = chains.iter().map(|c| spectrum0_ar(c)).collect();
    let mean_spec = mean(&spectra);
    let timeseries_se = (mean_spec / total as f64).sqrt();
    let ess = chains
        .iter()
        .zip(&spectra)
        .map(|(c, &s)| {
            let m = mean(c);
            let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (c.len() - 1).max(1) as f64;
            if s > 0.0 {
                c.len() as f64 * v / s
            } else {
                c.len() as f64
            }
        })
        .sum::<f64>()
        .min(total as f64);
    let psrf = if chains.len() >= 2 { Some(psrf_chains(chains)?) } else { None };
    Ok(ParameterSummary {
        mean: mu,
        sd,
        naive_se: sd / (total as f64).sqrt(),
        timeseries_se,
        quantiles,
        ess,
        psrf,
        n_draws: total,
    })
}

pub fn summarize(draws: &PosteriorDraws, param: Parameter) -> Result<ParameterSummary> {
    summarize_chains(&draws.series(param))
}

/// Potential scale reduction `sqrt((W + B) / W)` with `W` the mean
/// within-chain variance and `B` the variance of the chain means (both with
/// divisor equal to the count). Equals 1 exactly for identical chains.
pub fn psrf_chains(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::NeedsMultipleChains);
    }
    if let Some(short) = chains.iter().find(|c| c.len() < 2) {
        return Err(Error::InsufficientSamples { needed: 2, got: short.len() });
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let within: Vec<f64> = chains
        .iter()
        .zip(&means)
        .map(|(c, m)| c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / c.len() as f64)
        .collect();
    let w = mean(&within);
    let grand = mean(&means);
    let b = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / means.len() as f64;
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Ok(((w + b) / w).sqrt())
}

pub fn psrf(draws: &PosteriorDraws, param: Parameter) -> Result<f64> {
    psrf_chains(&draws.series(param))
}

/// Posterior of `h_i = Sigma_ii / (Sigma_ii + Sigma_e,ii)`: the ratio is
/// formed per draw and then summarized.
#[derive(Debug, Clone)]
pub struct HeritabilityPosterior {
    pub summaries: Vec<ParameterSummary>,
    /// `per_draw[trait][chain][draw]`.
    pub per_draw: Vec<Vec<Vec<f64>>>,
}

pub fn heritability(draws: &PosteriorDraws) -> Result<HeritabilityPosterior> {
    let d = draws.n_traits();
    let per_draw: Vec<Vec<Vec<f64>>> = (0..d).map(|i| draws.series(Parameter::Heritability(i))).collect();
    let summaries = per_draw
        .iter()
        .map(|chains| summarize_chains(chains))
        .collect::<Result<Vec<_>>>()?;
    Ok(HeritabilityPosterior { summaries, per_draw })
}

/// Gaussian kernel density with the `0.9 min(sd, IQR/1.34) n^{-1/5}` rule.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = mean(xs);
    let sd = (xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_type7(&sorted, 0.75) - quantile_type7(&sorted, 0.25);
    let mut lo = sd.min(iqr / 1.34);
    if !(lo > 0.0) {
        lo = sd;
    }
    if !(lo > 0.0) {
        lo = xs[0].abs();
    }
    if !(lo > 0.0) {
        lo = 1.0;
    }
    0.9 * lo * n.powf(-0.2)
}

pub fn kde(xs: &[f64], bandwidth: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (xs.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|g| xs.iter().map(|x| (-0.5 * ((g - x) / bandwidth).powi(2)).exp()).sum::<f64>() * norm)
        .collect()
}

/// Common grid for a set of chains: from the smallest draw minus three of the
/// largest bandwidth to the largest draw plus the same.
pub fn density_grid(chains: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let bws: Vec<f64> = chains.iter().map(|c| silverman_bandwidth(c)).collect();
    let pad = 3.0 * bws.iter().copied().fold(0.0, f64::max);
    let lo = chains.iter().flatten().copied().fold(f64::INFINITY, f64::min) - pad;
    let hi = chains.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max) + pad;
    let step = (hi - lo) / (DENSITY_GRID_POINTS - 1) as f64;
    let grid = (0..DENSITY_GRID_POINTS).map(|i| lo + step * i as f64).collect();
    (grid, bws)
}

pub fn trapezoid(grid: &[f64], ys: &[f64]) -> f64 {
    grid.windows(2)
        .zip(ys.windows(2))
        .map(|(g, y)| 0.5 * (g[1] - g[0]) * (y[0] + y[1]))
        .sum()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Writes `trace_<param>.csv` (`chain,iter,value`) and `density_<param>.csv`
/// (`grid,chain_1,...`) for every stored parameter and every heritability.
pub fn export_traces(draws: &PosteriorDraws, out_dir: impl AsRef<Path>) -> Result<()> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let d = draws.n_traits();
    let mut params = Parameter::stored(d, draws.n_covariates);
    params.extend((0..d).map(Parameter::Heritability));
    for param in params {
        let name = param.name(d);
        let series = draws.series(param);
        let path = out_dir.join(format!("trace_{name}.csv"));
        let mut w = create(&path)?;
        let res: std::io::Result<()> = (|| {
            writeln!(w, "chain,iter,value")?;
            for (c, (chain, values)) in draws.chains.iter().zip(&series).enumerate() {
                for (t, v) in chain.iterations.iter().zip(values) {
                    writeln!(w, "{},{t},{}", c + 1, fmt_f64(*v))?;
                }
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(&path, e))?;

        let (grid, bws) = density_grid(&series);
        let densities: Vec<Vec<f64>> = series.iter().zip(&bws).map(|(c, &bw)| kde(c, bw, &grid)).collect();
        let path = out_dir.join(format!("density_{name}.csv"));
        let mut w = create(&path)?;
        let res: std::io::Result<()> = (|| {
            let cols: Vec<String> = (1..=series.len()).map(|c| format!("chain_{c}")).collect();
            writeln!(w, "grid,{}", cols.join(","))?;
            for (i, g) in grid.iter().enumerate() {
                let vals: Vec<String> = densities.iter().map(|dens| fmt_f64(dens[i])).collect();
                writeln!(w, "{},{}", fmt_f64(*g), vals.join(","))?;
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads a `trace_*.csv` file back into per-chain series.
pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut chains: Vec<Vec<f64>> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate().skip(1) {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Parse {
            line: i,
            message: format!("{}: malformed trace row", path.display()),
        };
        let mut f = line.split(',');
        let chain: usize = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let _iter: usize = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let value: f64 = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        if chain == 0 {
            return Err(bad());
        }
        if chains.len() < chain {
            chains.resize(chain, Vec::new());
        }
        chains[chain - 1].push(value);
    }
    Ok(chains)
}

/// `heritability.tsv`: trait, mean, sd, naive_se, ts_se, q2.5, q97.5.
pub fn write_heritability_tsv(path: impl AsRef<Path>, trait_ids: &[String], h: &HeritabilityPosterior) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let res: std::io::Result<()> = (|| {
        writeln!(w, "trait\tmean\tsd\tnaive_se\tts_se\tq2.5\tq97.5")?;
        for (t, s) in trait_ids.iter().zip(&h.summaries) {
            writeln!(
                w,
                "{t}\t{}\t{}\t{}\t{}\t{}\t{}",
                fmt_f64(s.mean),
                fmt_f64(s.sd),
                fmt_f64(s.naive_se),
                fmt_f64(s.timeseries_se),
                fmt_f64(s.quantiles[0]),
                fmt_f64(s.quantiles[4])
            )?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// `summary.tsv`: one row per covariance entry with every summary column.
pub fn write_summary_tsv(path: impl AsRef<Path>, rows: &[(String, ParameterSummary)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let res: std::io::Result<()> = (|| {
        writeln!(w, "parameter\tmean\tsd\tnaive_se\tts_se\tq2.5\tq25\tq50\tq75\tq97.5\tess\tpsrf")?;
        for (name, s) in rows {
            let q: Vec<String> = s.quantiles.iter().map(|v| fmt_f64(*v)).collect();
            writeln!(
                w,
                "{name}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                fmt_f64(s.mean),
                fmt_f64(s.sd),
                fmt_f64(s.naive_se),
                fmt_f64(s.timeseries_se),
                q.join("\t"),
                fmt_f64(s.ess),
                s.psrf.map_or_else(|| "NA".to_owned(), fmt_f64)
            )?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    fn ar1(rho: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut x = rng.sample::<f64, _>(StandardNormal) / (1.0 - rho * rho).sqrt();
        (0..n)
            .map(|_| {
                x = rho * x + rng.sample::<f64, _>(StandardNormal);
                x
            })
            .collect()
    }

    #[test]
    fn iid_chain_standard_errors() {
        let chain = ar1(0.0, 10_000, 1);
        let s = summarize_chains(&[chain]).unwrap();
        assert!(s.mean.abs() < 0.04);
        assert!((s.naive_se - 0.01).abs() < 0.002);
        assert!((s.timeseries_se - 0.01).abs() < 0.002);
        assert!(s.psrf.is_none());
    }

    #[test]
    fn ar1_ratio_matches_closed_form() {
        let s = summarize_chains(&[ar1(0.9, 10_000, 2)]).unwrap();
        let want = (1.9f64 / 0.1).sqrt();
        let ratio = s.timeseries_se / s.naive_se;
        assert!((ratio - want).abs() < 0.25 * want, "{ratio} vs {want}");
        assert!(s.ess < s.n_draws as f64);
    }

    #[test]
    fn constant_chain() {
        let s = summarize_chains(&[vec![0.7; 200]]).unwrap();
        assert_eq!(s.sd, 0.0);
        assert_eq!(s.timeseries_se, 0.0);
        assert!(s.quantiles.iter().all(|&q| q == 0.7));
    }

    #[test]
    fn too_few_draws() {
        assert!(matches!(
            summarize_chains(&[vec![1.0; 50], vec![2.0; 49]]),
            Err(Error::InsufficientSamples { got: 99, .. })
        ));
    }

    #[test]
    fn type7_quantiles() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_type7(&xs, 0.5), 2.5);
        assert_eq!(quantile_type7(&xs, 0.25), 1.75);
        assert_eq!(quantile_type7(&xs, 1.0), 4.0);
        assert_eq!(quantile_type7(&xs, 0.0), 1.0);
    }

    #[test]
    fn psrf_cases() {
        let c = ar1(0.5, 1000, 3);
        assert_eq!(psrf_chains(&[c.clone(), c.clone()]).unwrap(), 1.0);
        let far: Vec<f64> = ar1(0.0, 1000, 4).iter().map(|v| v + 10.0).collect();
        assert!(psrf_chains(&[ar1(0.0, 1000, 5), far]).unwrap() > 1.1);
        let mixed = [ar1(0.5, 5000, 6), ar1(0.5, 5000, 7), ar1(0.5, 5000, 8)];
        assert!(psrf_chains(&mixed).unwrap() < 1.1);
        assert!(matches!(psrf_chains(&[c]), Err(Error::NeedsMultipleChains)));
    }

    #[test]
    fn batch_means_agrees_with_ar_estimate() {
        let chain = ar1(0.7, 20_000, 9);
        let s = summarize_chains(&[chain.clone()]).unwrap();
        let bm = batch_means_se(&[chain]);
        assert!((bm / s.timeseries_se - 1.0).abs() < 0.3);
    }

    #[test]
    fn kde_integrates_to_one() {
        let chains = [ar1(0.3, 3000, 10), ar1(0.3, 3000, 11)];
        let (grid, bws) = density_grid(&chains);
        for (c, bw) in chains.iter().zip(bws) {
            let dens = kde(c, bw, &grid);
            assert!((trapezoid(&grid, &dens) - 1.0).abs() < 1e-2);
        }
    }
}
