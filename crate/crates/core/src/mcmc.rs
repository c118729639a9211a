//! Adaptive random-walk Metropolis for the logit posterior under a normal
//! prior.
//!
//! The run has three phases: `tune_loops` batches of `tune_len` proposals
//! during which the log step scale follows a Robbins-Monro recursion toward
//! `target_accept`; a frozen burn-in; and `draws` retained iterations with
//! no thinning. The proposal covariance is `s^2 * S` where `S` is the
//! inverse negative Hessian of the log posterior at the starting point,
//! i.e. the MLE covariance under a flat prior and the prior covariance when
//! there are no data.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mle::{fit_mle, MleOptions};
use crate::model::{self, inverse_logit, Dataset};
use crate::priors::PriorSpec;
use crate::seed::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Posterior mode, found by Newton iterations from the prior mean.
    #[default]
    Mode,
    /// MLE when the fit converges, else the prior mean.
    Auto,
    Mle,
    PriorMean,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub tune_loops: usize,
    pub tune_len: usize,
    pub burn_in: usize,
    pub draws: usize,
    pub seed: u64,
    pub target_accept: f64,
    #[serde(default)]
    pub init: InitStrategy,
    /// Starting step scale; defaults to `2.38 / sqrt(dim)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_scale: Option<f64>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            tune_loops: 100,
            tune_len: 50,
            burn_in: 1000,
            draws: 5000,
            seed: 0,
            target_accept: 0.234,
            init: InitStrategy::Mode,
            initial_scale: None,
        }
    }
}

impl McmcConfig {
    /// Default settings with 1000 retained draws.
    pub fn desk() -> Self {
        McmcConfig {
            draws: 1000,
            ..McmcConfig::default()
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        McmcConfig { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::InvalidConfig("draws must be at least 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "target acceptance {} outside (0, 1)",
                self.target_accept
            )));
        }
        if let Some(s) = self.initial_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig(format!("invalid initial scale {s}")));
            }
        }
        Ok(())
    }
}

/// Unnormalized log posterior with the prior precision cached.
pub struct Posterior<'a> {
    data: &'a Dataset,
    prior_mean: DVector<f64>,
    prior_precision: DMatrix<f64>,
}

impl<'a> Posterior<'a> {
    pub fn new(data: &'a Dataset, prior: &PriorSpec) -> Result<Self> {
        if prior.dim() != data.dim() {
            return Err(Error::DimensionMismatch {
                expected: data.dim(),
                found: prior.dim(),
            });
        }
        prior.validate()?;
        let prior_precision =
            linalg::spd_inverse(&prior.cov).ok_or(Error::NonPositiveDefinitePrior)?;
        Ok(Posterior {
            data,
            prior_mean: prior.mean.clone(),
            prior_precision,
        })
    }

    /// `loglik(beta) - (beta - mean)' P (beta - mean) / 2`, constants dropped.
    pub fn log_density(&self, beta: &[f64]) -> f64 {
        model::log_likelihood_unchecked(beta, self.data) + self.log_prior(beta)
    }

    pub fn log_prior(&self, beta: &[f64]) -> f64 {
        let p = beta.len();
        let mut q = 0.0;
        for i in 0..p {
            let di = beta[i] - self.prior_mean[i];
            let mut row = 0.0;
            for j in 0..p {
                row += self.prior_precision[(i, j)] * (beta[j] - self.prior_mean[j]);
            }
            q += di * row;
        }
        -0.5 * q
    }

    /// Negative Hessian of the log posterior.
    pub fn information(&self, beta: &[f64]) -> DMatrix<f64> {
        let (_, _, info) = model::score_and_information(beta, self.data);
        info + &self.prior_precision
    }

    pub fn gradient(&self, beta: &[f64]) -> DVector<f64> {
        let (_, grad, _) = model::score_and_information(beta, self.data);
        let b = DVector::from_row_slice(beta);
        grad - &self.prior_precision * (b - &self.prior_mean)
    }
}

pub fn log_posterior(beta: &[f64], data: &Dataset, prior: &PriorSpec) -> Result<f64> {
    if beta.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            found: beta.len(),
        });
    }
    Ok(Posterior::new(data, prior)?.log_density(beta))
}

/// Retained draws, one row per iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    dim: usize,
    values: Vec<f64>,
    pub accept_rate: f64,
    pub final_step_scale: f64,
    pub config: McmcConfig,
}

impl PosteriorDraws {
    pub fn from_draws(draws: &[Vec<f64>], config: McmcConfig) -> Result<Self> {
        let dim = draws.first().map(Vec::len).ok_or(Error::EmptyInput)?;
        if let Some(bad) = draws.iter().find(|d| d.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: bad.len(),
            });
        }
        Ok(PosteriorDraws {
            dim,
            values: draws.concat(),
            accept_rate: 1.0,
            final_step_scale: 0.0,
            config,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_draws(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn draw(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.dim)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.iter().map(|d| d[j]).collect()
    }

    pub fn mean(&self) -> DVector<f64> {
        let k = self.n_draws() as f64;
        let mut m = DVector::zeros(self.dim);
        for d in self.iter() {
            for (mj, dj) in m.iter_mut().zip(d) {
                *mj += dj;
            }
        }
        m / k
    }

    /// Componentwise sample standard deviation.
    pub fn sd(&self) -> DVector<f64> {
        let m = self.mean();
        let k = self.n_draws() as f64;
        let mut v = DVector::<f64>::zeros(self.dim);
        for d in self.iter() {
            for j in 0..self.dim {
                v[j] += (d[j] - m[j]).powi(2);
            }
        }
        v.map(|s| (s / (k - 1.0).max(1.0)).sqrt())
    }

    /// Empirical quantile (linear interpolation) of coefficient `j`.
    pub fn quantile(&self, j: usize, q: f64) -> f64 {
        let mut col = self.column(j);
        col.sort_by(f64::total_cmp);
        crate::rsd::quantile_sorted(&col, q)
    }

    pub fn ess(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|j| effective_sample_size(&self.column(j)))
            .collect()
    }

    pub fn diagnostics(&self) -> Diagnostics {
        Diagnostics {
            accept_rate: self.accept_rate,
            ess: self.ess(),
            step_scale: self.final_step_scale,
        }
    }

    /// CSV with header `b0,...,b{C-1}`, one row per draw.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record((0..self.dim).map(|j| format!("b{j}")))?;
        for d in self.iter() {
            w.write_record(d.iter().map(|v| format!("{v:e}")))?;
        }
        w.flush().map_err(|e| Error::io("draws.csv", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub accept_rate: f64,
    pub ess: Vec<f64>,
    pub step_scale: f64,
}

/// Newton ascent on the (strictly concave) log posterior.
pub fn posterior_mode(posterior: &Posterior<'_>, start: DVector<f64>) -> DVector<f64> {
    let mut beta = start;
    let mut lp = posterior.log_density(beta.as_slice());
    for _ in 0..50 {
        let grad = posterior.gradient(beta.as_slice());
        if linalg::max_abs(&grad) < 1e-8 {
            break;
        }
        let Some(chol) = posterior.information(beta.as_slice()).cholesky() else {
            break;
        };
        let step = chol.solve(&grad);
        let mut t = 1.0;
        loop {
            let candidate = &beta + &step * t;
            let cand_lp = posterior.log_density(candidate.as_slice());
            if cand_lp >= lp || t < 1e-8 {
                if cand_lp >= lp {
                    beta = candidate;
                    lp = cand_lp;
                }
                break;
            }
            t *= 0.5;
        }
        if t < 1e-8 {
            break;
        }
    }
    beta
}

fn starting_point(
    posterior: &Posterior<'_>,
    data: &Dataset,
    prior: &PriorSpec,
    init: InitStrategy,
) -> DVector<f64> {
    let mle = || {
        fit_mle(data, &MleOptions::default())
            .ok()
            .filter(|e| e.converged)
            .map(|e| e.beta)
    };
    match init {
        InitStrategy::Mode => posterior_mode(posterior, prior.mean.clone()),
        InitStrategy::Auto | InitStrategy::Mle => mle().unwrap_or_else(|| prior.mean.clone()),
        InitStrategy::PriorMean => prior.mean.clone(),
        InitStrategy::Zero => DVector::zeros(prior.dim()),
    }
}

/// Draw from the posterior of the logit coefficients.
///
/// Deterministic for a fixed `config` (including its seed). The data may
/// be empty or single-class.
pub fn sample_posterior(
    data: &Dataset,
    prior: &PriorSpec,
    config: &McmcConfig,
) -> Result<PosteriorDraws> {
    config.validate()?;
    let posterior = Posterior::new(data, prior)?;
    let p = data.dim();

    let mut current = starting_point(&posterior, data, prior, config.init);
    let proposal_cov =
        linalg::spd_inverse(&posterior.information(current.as_slice())).unwrap_or_else(|| prior.cov.clone());
    let chol = proposal_cov
        .cholesky()
        .or_else(|| prior.cov.clone().cholesky())
        .ok_or(Error::NonPositiveDefinitePrior)?;
    let l = chol.l();

    let mut rng = rng_from(config.seed);
    let mut log_scale = config
        .initial_scale
        .unwrap_or(2.38 / (p as f64).sqrt())
        .ln();
    let mut current_lp = posterior.log_density(current.as_slice());
    let mut z = DVector::zeros(p);
    let mut candidate = DVector::zeros(p);

    let mut step = |current: &mut DVector<f64>, current_lp: &mut f64, scale: f64| -> bool {
        for zj in z.iter_mut() {
            *zj = rng.sample::<f64, _>(StandardNormal);
        }
        candidate.copy_from(current);
        candidate.gemv(scale, &l, &z, 1.0);
        let lp = posterior.log_density(candidate.as_slice());
        let u: f64 = rng.gen();
        if lp.is_finite() && u.ln() < lp - *current_lp {
            current.copy_from(&candidate);
            *current_lp = lp;
            true
        } else {
            false
        }
    };

    for k in 0..config.tune_loops {
        let scale = log_scale.exp();
        let mut accepted = 0usize;
        for _ in 0..config.tune_len {
            accepted += step(&mut current, &mut current_lp, scale) as usize;
        }
        if config.tune_len > 0 {
            let rate = accepted as f64 / config.tune_len as f64;
            log_scale += (rate - config.target_accept) / ((k + 1) as f64).powf(0.6);
        }
    }

    let scale = log_scale.exp();
    for _ in 0..config.burn_in {
        step(&mut current, &mut current_lp, scale);
    }

    let mut values = Vec::with_capacity(config.draws * p);
    let mut accepted = 0usize;
    for _ in 0..config.draws {
        accepted += step(&mut current, &mut current_lp, scale) as usize;
        values.extend_from_slice(current.as_slice());
    }

    Ok(PosteriorDraws {
        dim: p,
        values,
        accept_rate: accepted as f64 / config.draws as f64,
        final_step_scale: scale,
        config: *config,
    })
}

/// Average over draws of the predicted probability (not the probability at
/// the average coefficient).
pub fn posterior_mean_prediction(draws: &PosteriorDraws, x: &[f64]) -> Result<f64> {
    if x.len() != draws.dim() {
        return Err(Error::DimensionMismatch {
            expected: draws.dim(),
            found: x.len(),
        });
    }
    let total: f64 = draws.iter().map(|b| inverse_logit(model::dot(b, x))).sum();
    Ok(total / draws.n_draws() as f64)
}

/// Effective sample size from Geyer's initial monotone sequence of paired
/// autocorrelations.
pub fn effective_sample_size(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return n as f64;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let var = centered.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return n as f64;
    }
    let rho = |lag: usize| -> f64 {
        centered[..n - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / (n as f64 * var)
    };
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    (n as f64 / tau.max(1.0 / n as f64)).min(n as f64 * (n as f64).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CovariateSchema;
    use crate::priors::standard_prior;
    use std::sync::Arc;

    fn prior(mean: &[f64], var: f64) -> PriorSpec {
        let mut p = standard_prior(mean.len(), var).unwrap();
        p.mean = DVector::from_row_slice(mean);
        p
    }

    fn small_data() -> Dataset {
        Dataset::from_rows(
            &[vec![1.0, 0.5], vec![1.0, -1.0], vec![1.0, 2.0], vec![1.0, 0.0]],
            &[true, false, true, false],
        )
        .unwrap()
    }

    #[test]
    fn empty_data_leaves_prior_density() {
        let empty = Dataset::empty(Arc::new(CovariateSchema::numeric(1)));
        let pr = prior(&[0.5, -1.0], 2.0);
        let at_mode = log_posterior(&[0.5, -1.0], &empty, &pr).unwrap();
        assert_eq!(at_mode, 0.0);
        let a = log_posterior(&[1.5, -1.0], &empty, &pr).unwrap();
        let b = log_posterior(&[0.5, 1.0], &empty, &pr).unwrap();
        // N(0,2) log-density differences: -(1)/4 and -(4)/4
        assert!((a - at_mode + 0.25).abs() < 1e-15);
        assert!((b - a + 0.75).abs() < 1e-15);
    }

    #[test]
    fn non_pd_prior_rejected() {
        let mut pr = prior(&[0.0, 0.0], 1.0);
        pr.cov[(1, 1)] = -1.0;
        let data = small_data();
        assert!(matches!(
            sample_posterior(&data, &pr, &McmcConfig::desk()),
            Err(Error::NonPositiveDefinitePrior)
        ));
        assert!(matches!(
            log_posterior(&[0.0], &data, &prior(&[0.0, 0.0], 1.0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let data = small_data();
        let pr = prior(&[0.0, 0.0], 10.0);
        let cfg = McmcConfig::desk().with_seed(42);
        let a = sample_posterior(&data, &pr, &cfg).unwrap();
        let b = sample_posterior(&data, &pr, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_draws(), 1000);
        let c = sample_posterior(&data, &pr, &cfg.with_seed(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tight_prior_dominates() {
        let data = small_data();
        let pr = prior(&[0.3, -0.2], 1e-8);
        let draws = sample_posterior(&data, &pr, &McmcConfig::desk().with_seed(1)).unwrap();
        let m = draws.mean();
        assert!((m[0] - 0.3).abs() < 1e-3 && (m[1] + 0.2).abs() < 1e-3);
    }

    #[test]
    fn single_class_data_is_fine() {
        let data = Dataset::from_rows(&[vec![1.0], vec![1.0]], &[true, true]).unwrap();
        let draws =
            sample_posterior(&data, &prior(&[0.0], 10.0), &McmcConfig::desk().with_seed(2)).unwrap();
        assert!(draws.mean()[0] > 0.0);
    }

    #[test]
    fn prediction_averages_probabilities() {
        let cfg = McmcConfig::desk();
        let same = PosteriorDraws::from_draws(&vec![vec![0.4, -0.3]; 5], cfg).unwrap();
        let x = [1.0, 2.0];
        let p = posterior_mean_prediction(&same, &x).unwrap();
        assert!((p - inverse_logit(0.4 - 0.6)).abs() < 1e-15);

        let pair = PosteriorDraws::from_draws(&[vec![0.7, 1.1], vec![-0.7, -1.1]], cfg).unwrap();
        assert_eq!(posterior_mean_prediction(&pair, &[1.0, 0.3]).unwrap(), 0.5);

        let three = PosteriorDraws::from_draws(&[vec![0.0], vec![3f64.ln()], vec![-(3f64.ln())]], cfg).unwrap();
        let expected = (0.5 + 0.75 + 0.25) / 3.0;
        assert!((posterior_mean_prediction(&three, &[1.0]).unwrap() - expected).abs() < 1e-12);
        assert!(posterior_mean_prediction(&three, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn ess_of_independent_and_sticky_series() {
        let mut rng = rng_from(3);
        let iid: Vec<f64> = (0..4000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let ess = effective_sample_size(&iid);
        assert!(ess > 3000.0 && ess < 5500.0, "{ess}");
        // AR(1) with phi = 0.9 has ESS about n (1 - phi) / (1 + phi)
        let mut ar = vec![0.0f64; 20000];
        for t in 1..ar.len() {
            let e: f64 = rng.sample(StandardNormal);
            ar[t] = 0.9 * ar[t - 1] + e;
        }
        let ess = effective_sample_size(&ar);
        let expected = 20000.0 * 0.1 / 1.9;
        assert!((ess / expected - 1.0).abs() < 0.3, "{ess} vs {expected}");
    }

    #[test]
    fn draws_csv_header() {
        let d = PosteriorDraws::from_draws(&[vec![1.0, 2.0, 3.0]], McmcConfig::desk()).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("b0,b1,b2\n"));
    }
}
