//! Maximum-likelihood fitting of the attempt-level logit and the usual
//! goodness-of-fit statistics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_matrix, serde_vector};
use crate::model::{self, inverse_logit, Dataset};
use crate::special::chi_square_sf;
use crate::FORMAT_VERSION;

/// Any coefficient beyond this magnitude is taken as a sign of separation.
pub const SEPARATION_BOUND: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MleOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub ridge_on_separation: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions {
            tol: 1e-8,
            max_iter: 100,
            ridge_on_separation: 1e-4,
        }
    }
}

/// Fitted coefficients with their covariance (inverse observed information).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefEstimate {
    #[serde(default = "crate::format_version")]
    pub format_version: u32,
    pub schema_hash: String,
    #[serde(with = "serde_vector")]
    pub beta: DVector<f64>,
    #[serde(with = "serde_matrix")]
    pub cov: DMatrix<f64>,
    pub n_rows: usize,
    pub converged: bool,
    pub loglik: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quarter: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CoefEstimate {
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// Shape and symmetry checks for estimates read from disk.
    pub fn validate(&self) -> Result<()> {
        let p = self.beta.len();
        if self.cov.nrows() != p || self.cov.ncols() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: self.cov.nrows(),
            });
        }
        if !linalg::is_symmetric(&self.cov, 1e-10) {
            return Err(Error::AsymmetricInput);
        }
        Ok(())
    }

    pub fn std_errors(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

enum Newton {
    Converged(DVector<f64>),
    /// Singular information or a runaway coefficient.
    Separated,
    Exhausted(DVector<f64>),
}

fn newton(data: &Dataset, penalty: f64, opts: &MleOptions) -> Newton {
    let p = data.dim();
    let mut beta = DVector::zeros(p);
    let objective = |b: &DVector<f64>| {
        model::log_likelihood_unchecked(b.as_slice(), data) - penalty * b.norm_squared()
    };
    for _ in 0..opts.max_iter {
        let (ll, mut grad, mut info) = model::score_and_information(beta.as_slice(), data);
        let obj = ll - penalty * beta.norm_squared();
        if penalty > 0.0 {
            grad -= &beta * (2.0 * penalty);
            for j in 0..p {
                info[(j, j)] += 2.0 * penalty;
            }
        }
        if linalg::max_abs(&grad) < opts.tol {
            return Newton::Converged(beta);
        }
        let Some(chol) = info.cholesky() else {
            return Newton::Separated;
        };
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut candidate = &beta + &step;
        while objective(&candidate) < obj - 1e-12 * obj.abs() && t > 1e-10 {
            t *= 0.5;
            candidate = &beta + &step * t;
        }
        beta = candidate;
        if penalty == 0.0 && linalg::max_abs(&beta) > SEPARATION_BOUND {
            return Newton::Separated;
        }
    }
    Newton::Exhausted(beta)
}

/// Fit the logit by Newton-Raphson (equivalently IRLS).
///
/// When the information matrix is singular or a coefficient runs past
/// [`SEPARATION_BOUND`], the fit is redone with a small quadratic penalty
/// and flagged `converged = false`. For such fits `cov` is the
/// pseudo-inverse of the unpenalized information at the penalized
/// estimate, so aliased directions carry zero variance.
pub fn fit_mle(data: &Dataset, opts: &MleOptions) -> Result<CoefEstimate> {
    let n = data.n_rows();
    let p = data.dim();
    if n < p {
        return Err(Error::DegenerateData(format!(
            "{n} rows for {p} coefficients"
        )));
    }
    let successes = data.successes();
    if successes == 0 || successes == n {
        return Err(Error::DegenerateData("single-class outcome".into()));
    }

    let (beta, converged) = match newton(data, 0.0, opts) {
        Newton::Converged(b) => (b, true),
        Newton::Exhausted(b) => (b, false),
        Newton::Separated => match newton(data, opts.ridge_on_separation, opts) {
            Newton::Converged(b) | Newton::Exhausted(b) => (b, false),
            Newton::Separated => {
                return Err(Error::DegenerateData(
                    "penalized fit has singular information".into(),
                ))
            }
        },
    };

    let (loglik, _, info) = model::score_and_information(beta.as_slice(), data);
    let (cov, converged) = match (converged, linalg::spd_inverse(&info)) {
        (true, Some(cov)) => (cov, true),
        (_, _) => (linalg::psd_pseudo_inverse(&info, 1e-10), false),
    };
    if !converged {
        log::warn!("logit fit did not converge cleanly on {n} rows; penalized estimate returned");
    }
    Ok(CoefEstimate {
        format_version: FORMAT_VERSION,
        schema_hash: data.schema().fingerprint(),
        beta,
        cov,
        n_rows: n,
        converged,
        loglik,
        quarter: None,
        seed: None,
    })
}

/// Intercept-only log-likelihood `s ln(s/n) + f ln(f/n)`.
pub fn null_log_likelihood(data: &Dataset) -> Result<f64> {
    let n = data.n_rows() as f64;
    let s = data.successes() as f64;
    let f = n - s;
    if s == 0.0 || f == 0.0 {
        return Err(Error::DegenerateData("single-class outcome".into()));
    }
    Ok(s * (s / n).ln() + f * (f / n).ln())
}

/// Nagelkerke's rescaled Cox-Snell R².
pub fn nagelkerke_r2(est: &CoefEstimate, data: &Dataset) -> Result<f64> {
    let l1 = model::log_likelihood(est.beta.as_slice(), data)?;
    let l0 = null_log_likelihood(data)?;
    let n = data.n_rows() as f64;
    let cox_snell = 1.0 - (2.0 * (l0 - l1) / n).exp();
    let max = 1.0 - (2.0 * l0 / n).exp();
    Ok((cox_snell / max).clamp(0.0, 1.0))
}

/// Area under the ROC curve as the Mann-Whitney concordance; ties count 1/2.
pub fn auc(pred: &[f64], y: &[bool]) -> Result<f64> {
    if pred.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: pred.len(),
            found: y.len(),
        });
    }
    let n_pos = y.iter().filter(|&&v| v).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateData(
            "AUC needs both outcome classes".into(),
        ));
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]));
    // midranks
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pred[order[j + 1]] == pred[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if y[k] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HosmerLemeshow {
    pub stat: f64,
    pub pvalue: f64,
    pub groups: usize,
}

/// Hosmer-Lemeshow decile-of-risk test with `groups - 2` degrees of freedom.
/// Rows are stably sorted by prediction and cut into near-equal groups.
pub fn hosmer_lemeshow(pred: &[f64], y: &[bool], groups: usize) -> Result<HosmerLemeshow> {
    if groups < 2 {
        return Err(Error::TooFewGroups(groups));
    }
    if pred.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: pred.len(),
            found: y.len(),
        });
    }
    let n = pred.len();
    if n < 2 * groups {
        return Err(Error::DegenerateData(format!(
            "{n} rows for {groups} groups"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]).then(a.cmp(&b)));
    let mut stat = 0.0;
    for g in 0..groups {
        let members = &order[g * n / groups..(g + 1) * n / groups];
        let size = members.len() as f64;
        let observed = members.iter().filter(|&&i| y[i]).count() as f64;
        let expected: f64 = members.iter().map(|&i| pred[i]).sum();
        let num = (observed - expected).powi(2);
        let den = expected * (1.0 - expected / size);
        if num == 0.0 {
            continue;
        }
        stat += if den > 0.0 { num / den } else { f64::INFINITY };
    }
    Ok(HosmerLemeshow {
        stat,
        pvalue: chi_square_sf(stat, groups - 2),
        groups,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub nagelkerke_r2: f64,
    pub auc: f64,
    pub hl_stat: f64,
    pub hl_pvalue: f64,
    pub hl_groups: usize,
}

pub fn fitted_probabilities(beta: &DVector<f64>, data: &Dataset) -> Vec<f64> {
    data.rows()
        .map(|(x, _)| inverse_logit(model::dot(beta.as_slice(), x)))
        .collect()
}

pub fn fit_stats(est: &CoefEstimate, data: &Dataset, groups: usize) -> Result<FitStats> {
    let pred = fitted_probabilities(&est.beta, data);
    let y: Vec<bool> = data.outcomes().iter().map(|&v| v > 0.5).collect();
    let hl = hosmer_lemeshow(&pred, &y, groups)?;
    Ok(FitStats {
        nagelkerke_r2: nagelkerke_r2(est, data)?,
        auc: auc(&pred, &y)?,
        hl_stat: hl.stat,
        hl_pvalue: hl.pvalue,
        hl_groups: groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intercept_only(s: usize, f: usize) -> Dataset {
        let rows = vec![vec![1.0]; s + f];
        let y: Vec<bool> = (0..s + f).map(|i| i < s).collect();
        Dataset::from_rows(&rows, &y).unwrap()
    }

    #[test]
    fn intercept_only_closed_form() {
        let est = fit_mle(&intercept_only(30, 70), &MleOptions::default()).unwrap();
        assert!(est.converged);
        assert!((est.beta[0] - (30.0f64 / 70.0).ln()).abs() < 1e-10);
        assert!((est.cov[(0, 0)] - (1.0 / 30.0 + 1.0 / 70.0)).abs() < 1e-10);
    }

    #[test]
    fn separated_pair_returns_penalized_fit() {
        let data = Dataset::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]], &[true, false]).unwrap();
        let est = fit_mle(&data, &MleOptions::default()).unwrap();
        assert!(!est.converged);
        assert!(est.beta.iter().all(|b| b.is_finite()));
        assert!(est.beta[1] > 0.0);
    }

    #[test]
    fn aliased_columns_give_singular_cov() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..300 {
            let z: f64 = rng.gen_range(-1.0..1.0);
            rows.push(vec![1.0, z, z]);
            y.push(rng.gen_bool(inverse_logit(0.5 * z)));
        }
        let est = fit_mle(&Dataset::from_rows(&rows, &y).unwrap(), &MleOptions::default()).unwrap();
        assert!(!est.converged);
        assert!(linalg::min_eigenvalue(&est.cov) < 1e-12);
        assert!(est.cov[(1, 1)] > 0.0 && est.cov[(2, 2)] > 0.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            fit_mle(&intercept_only(5, 0), &MleOptions::default()),
            Err(Error::DegenerateData(_))
        ));
        let tiny = Dataset::from_rows(&[vec![1.0, 0.0, 1.0]], &[true]).unwrap();
        assert!(fit_mle(&tiny, &MleOptions::default()).is_err());
    }

    #[test]
    fn converged_fit_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..400 {
            let r = vec![1.0, rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0)];
            let eta = -0.3 + 0.8 * r[1] - 0.5 * r[2];
            y.push(rng.gen_bool(inverse_logit(eta)));
            rows.push(r);
        }
        let data = Dataset::from_rows(&rows, &y).unwrap();
        let est = fit_mle(&data, &MleOptions::default()).unwrap();
        assert!(est.converged);
        let g = model::log_likelihood_gradient(est.beta.as_slice(), &data).unwrap();
        assert!(g.norm() < 1e-8);
        let mean_fit: f64 = fitted_probabilities(&est.beta, &data).iter().sum::<f64>() / 400.0;
        let observed = data.successes() as f64 / 400.0;
        assert!((mean_fit - observed).abs() < 1e-8);
        assert!(est.cov.clone().cholesky().is_some());

        // duplicating every row halves the covariance
        let mut doubled = data.clone();
        doubled.extend(&data).unwrap();
        let est2 = fit_mle(&doubled, &MleOptions::default()).unwrap();
        for (a, b) in est.cov.iter().zip(est2.cov.iter()) {
            assert!((a / 2.0 - b).abs() <= 1e-8 * a.abs());
        }

        let r2 = nagelkerke_r2(&est, &data).unwrap();
        assert!((0.0..=1.0).contains(&r2));
    }

    #[test]
    fn nagelkerke_zero_slopes_and_steep_predictor() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![1.0, (i % 4) as f64]).collect();
        let y: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let data = Dataset::from_rows(&rows, &y).unwrap();
        let flat = CoefEstimate {
            format_version: FORMAT_VERSION,
            schema_hash: String::new(),
            beta: DVector::from_vec(vec![0.0, 0.0]),
            cov: DMatrix::identity(2, 2),
            n_rows: 40,
            converged: true,
            loglik: 0.0,
            quarter: None,
            seed: None,
        };
        assert!(nagelkerke_r2(&flat, &data).unwrap().abs() < 1e-12);

        // x = +-1 determines y; a slope of 12 is nearly perfect
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![1.0, if i % 2 == 0 { 1.0 } else { -1.0 }]).collect();
        let y: Vec<bool> = (0..50).map(|i| i % 2 == 0).collect();
        let data = Dataset::from_rows(&rows, &y).unwrap();
        let steep = CoefEstimate {
            beta: DVector::from_vec(vec![0.0, 12.0]),
            ..flat
        };
        assert!(nagelkerke_r2(&steep, &data).unwrap() >= 0.95);
    }

    #[test]
    fn nagelkerke_matches_hand_formula() {
        let rows: Vec<Vec<f64>> = [0.2, -1.0, 0.5, 1.3, -0.7, 2.0, 0.0, -0.2, 0.9, -1.5]
            .iter()
            .map(|&x| vec![1.0, x])
            .collect();
        let y = [true, false, true, true, false, true, false, false, true, false];
        let data = Dataset::from_rows(&rows, &y).unwrap();
        let beta = [0.1, 0.9];
        // naive evaluation of both log-likelihoods
        let mut l1 = 0.0;
        for (r, &yy) in rows.iter().zip(&y) {
            let p = 1.0 / (1.0 + (-(beta[0] + beta[1] * r[1])).exp());
            l1 += if yy { p.ln() } else { (1.0 - p).ln() };
        }
        let l0 = 5.0 * 0.5f64.ln() + 5.0 * 0.5f64.ln();
        let expected = (1.0 - (2.0 * (l0 - l1) / 10.0f64).exp()) / (1.0 - (2.0 * l0 / 10.0f64).exp());
        let est = CoefEstimate {
            format_version: FORMAT_VERSION,
            schema_hash: String::new(),
            beta: DVector::from_row_slice(&beta),
            cov: DMatrix::identity(2, 2),
            n_rows: 10,
            converged: true,
            loglik: l1,
            quarter: None,
            seed: None,
        };
        assert!((nagelkerke_r2(&est, &data).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(
            auc(&[0.8, 0.6, 0.4, 0.2], &[true, false, true, false]).unwrap(),
            0.75
        );
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auc_matches_pair_enumeration_and_is_rank_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(2..60);
            // coarse values force ties
            let pred: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
            let mut y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            y[0] = true;
            y[1] = false;
            let mut conc = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if y[i] && !y[j] {
                        pairs += 1.0;
                        conc += if pred[i] > pred[j] {
                            1.0
                        } else if pred[i] == pred[j] {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
            }
            let a = auc(&pred, &y).unwrap();
            assert!((a - conc / pairs).abs() < 1e-12);
            let transformed: Vec<f64> = pred.iter().map(|p| (3.0 * p).exp() - 7.0).collect();
            assert!((auc(&transformed, &y).unwrap() - a).abs() < 1e-12);
        }
    }

    #[test]
    fn hosmer_lemeshow_exact_fit_and_errors() {
        // every group: 2 rows at p = 0.5, one success
        let pred = vec![0.5; 8];
        let y = vec![true, false, true, false, true, false, true, false];
        let hl = hosmer_lemeshow(&pred, &y, 4).unwrap();
        assert_eq!(hl.stat, 0.0);
        assert_eq!(hl.pvalue, 1.0);
        assert!(matches!(hosmer_lemeshow(&pred, &y, 1), Err(Error::TooFewGroups(1))));
        assert!(hosmer_lemeshow(&pred, &y, 5).is_err());
    }

    #[test]
    fn hosmer_lemeshow_hand_instances() {
        // Two groups: {0.1,0.2,0.3} with 1 success, {0.6,0.7,0.8} with 3.
        let pred = [0.7, 0.1, 0.3, 0.8, 0.2, 0.6];
        let y = [true, false, true, true, false, true];
        let e1: f64 = 0.6;
        let e2: f64 = 2.1;
        let stat = (1.0 - e1).powi(2) / (e1 * (1.0 - e1 / 3.0)) + (3.0 - e2).powi(2) / (e2 * (1.0 - e2 / 3.0));
        let hl = hosmer_lemeshow(&pred, &y, 2).unwrap();
        assert!((hl.stat - stat).abs() < 1e-12);
        // zero degrees of freedom: point mass at 0
        assert_eq!(hl.pvalue, 0.0);

        // Three groups -> 1 df, where the tail is erfc(sqrt(x/2)).
        let pred = [0.1, 0.15, 0.4, 0.45, 0.8, 0.85];
        let y = [false, true, false, false, true, true];
        let groups = [(1.0, 0.25), (0.0, 0.85), (2.0, 1.65)];
        let stat: f64 = groups
            .iter()
            .map(|&(o, e): &(f64, f64)| (o - e).powi(2) / (e * (1.0 - e / 2.0)))
            .sum();
        let hl = hosmer_lemeshow(&pred, &y, 3).unwrap();
        assert!((hl.stat - stat).abs() < 1e-12);
        let oracle = statrs::function::erf::erfc((stat / 2.0).sqrt());
        assert!((hl.pvalue - oracle).abs() < 1e-8);
    }

    #[test]
    fn chi_square_tail_against_independent_cdf() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        for df in 1..15 {
            let dist = ChiSquared::new(df as f64).unwrap();
            for &x in &[0.01, 0.5, 1.0, 3.7, 8.0, 15.0, 30.0, 60.0] {
                let ours = chi_square_sf(x, df);
                let theirs = 1.0 - dist.cdf(x);
                assert!((ours - theirs).abs() < 1e-10, "df={df} x={x}: {ours} vs {theirs}");
            }
        }
    }

    #[test]
    fn coef_estimate_json_shape() {
        let est = fit_mle(&intercept_only(3, 7), &MleOptions::default()).unwrap();
        let json = serde_json::to_value(&est).unwrap();
        for key in ["schema_hash", "beta", "cov", "n_rows", "converged", "loglik"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert!(json["cov"][0].is_array());
        let back: CoefEstimate = serde_json::from_value(json).unwrap();
        assert_eq!(back, est);
    }
}
