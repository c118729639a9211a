//! Normal priors `beta ~ N(mean, cov)` built from historical fits or from
//! published coefficient estimates.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mle::CoefEstimate;
use crate::model::CovariateSchema;
use crate::FORMAT_VERSION;

/// Ridge weight applied to historical covariances before inversion.
pub const DEFAULT_RIDGE_LAMBDA: f64 = 0.003;
/// Finite stand-in for an infinite prior variance.
pub const STANDARD_VARIANCE: f64 = 1e6;
/// Logit/probit coefficient ratio used to put probit results on the logit scale.
pub const PROBIT_TO_LOGIT: f64 = 1.61;
/// Minimum eigenvalue below which a single-quarter covariance is unusable.
pub const MIN_EIGENVALUE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMethod {
    Standard,
    Pwp,
    Last,
    Lastz,
    Lit,
}

impl PriorMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorMethod::Standard => "standard",
            PriorMethod::Pwp => "pwp",
            PriorMethod::Last => "last",
            PriorMethod::Lastz => "lastz",
            PriorMethod::Lit => "lit",
        }
    }
}

impl std::fmt::Display for PriorMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PriorMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "standard" => PriorMethod::Standard,
            "pwp" => PriorMethod::Pwp,
            "last" => PriorMethod::Last,
            "lastz" => PriorMethod::Lastz,
            "lit" => PriorMethod::Lit,
            other => return Err(Error::InvalidConfig(format!("unknown prior method `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Quarter ids or study ids the prior was built from.
    #[serde(default)]
    pub sources: Vec<String>,
    /// Ridge weight finally used (PWP only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// Coefficients that received pooled evidence (LIT only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched: Option<Vec<String>>,
}

/// Multivariate normal prior over the coefficient vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorFile", into = "PriorFile")]
pub struct PriorSpec {
    pub method: PriorMethod,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub schema_hash: Option<String>,
    /// Master seed of the run that produced the prior, if any.
    pub seed: Option<u64>,
    pub provenance: Provenance,
}

impl PriorSpec {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cov.nrows() != self.dim() || self.cov.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: self.cov.nrows(),
            });
        }
        if !linalg::is_symmetric(&self.cov, 1e-10) {
            return Err(Error::AsymmetricInput);
        }
        Ok(())
    }
}

/// On-disk form: diagonal covariances are written as `diag`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorFile {
    #[serde(default = "crate::format_version")]
    format_version: u32,
    method: PriorMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schema_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cov: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    diag: Option<Vec<f64>>,
    #[serde(default)]
    provenance: Provenance,
}

impl TryFrom<PriorFile> for PriorSpec {
    type Error = Error;

    fn try_from(f: PriorFile) -> Result<Self> {
        let cov = match (f.cov, f.diag) {
            (Some(rows), None) => linalg::serde_matrix::from_rows(&rows)
                .map_err(|e| Error::InvalidConfig(format!("prior cov: {e}")))?,
            (None, Some(d)) => DMatrix::from_diagonal(&DVector::from_vec(d)),
            _ => {
                return Err(Error::InvalidConfig(
                    "prior needs exactly one of `cov` or `diag`".into(),
                ))
            }
        };
        let spec = PriorSpec {
            method: f.method,
            mean: DVector::from_vec(f.mean),
            cov,
            schema_hash: f.schema_hash,
            seed: f.seed,
            provenance: f.provenance,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<PriorSpec> for PriorFile {
    fn from(p: PriorSpec) -> Self {
        let (cov, diag) = if linalg::is_diagonal(&p.cov) {
            (None, Some(p.cov.diagonal().iter().copied().collect()))
        } else {
            (Some(linalg::serde_matrix::to_rows(&p.cov)), None)
        };
        PriorFile {
            format_version: FORMAT_VERSION,
            method: p.method,
            schema_hash: p.schema_hash,
            seed: p.seed,
            mean: p.mean.iter().copied().collect(),
            cov,
            diag,
            provenance: p.provenance,
        }
    }
}

/// Zero mean, `variance * I` covariance.
pub fn standard_prior(dim: usize, variance: f64) -> Result<PriorSpec> {
    if dim == 0 {
        return Err(Error::InvalidConfig("prior dimension must be at least 1".into()));
    }
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::InvalidConfig(format!("invalid prior variance {variance}")));
    }
    Ok(PriorSpec {
        method: PriorMethod::Standard,
        mean: DVector::zeros(dim),
        cov: DMatrix::identity(dim, dim) * variance,
        schema_hash: None,
        seed: None,
        provenance: Provenance::default(),
    })
}

/// `(1 - lambda) V + lambda diag(V)`: shrink off-diagonals, keep the diagonal.
pub fn ridge_stabilize(v: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !linalg::is_symmetric(v, 1e-10) {
        return Err(Error::AsymmetricInput);
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("ridge lambda {lambda} outside [0, 1]")));
    }
    let mut out = v * (1.0 - lambda);
    for i in 0..v.nrows() {
        out[(i, i)] = v[(i, i)];
    }
    Ok(out)
}

fn quarter_label(fit: &CoefEstimate, idx: usize) -> String {
    fit.quarter
        .map_or_else(|| format!("fit{}", idx + 1), |q| q.to_string())
}

/// Precision-weighted pooling of historical fits.
///
/// Each covariance is ridge-stabilized and inverted; the mean is the
/// precision-weighted average of the estimates and the covariance is the
/// inverse of the (weight-averaged) precision. If any inversion fails the
/// ridge weight is raised tenfold, up to 1.
pub fn pwp_prior(
    fits: &[CoefEstimate],
    lambda: f64,
    weights: Option<&[f64]>,
) -> Result<PriorSpec> {
    let first = fits.first().ok_or(Error::EmptyInput)?;
    let p = first.dim();
    for fit in fits {
        fit.validate()?;
        if fit.schema_hash != first.schema_hash || fit.dim() != p {
            return Err(Error::SchemaMismatch(format!(
                "fit schema {} differs from {}",
                fit.schema_hash, first.schema_hash
            )));
        }
    }
    let uniform = vec![1.0; fits.len()];
    let w = match weights {
        Some(w) => {
            if w.len() != fits.len() {
                return Err(Error::DimensionMismatch {
                    expected: fits.len(),
                    found: w.len(),
                });
            }
            if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::InvalidConfig(
                    "PWP weights must be non-negative with a positive sum".into(),
                ));
            }
            w
        }
        None => &uniform[..],
    };
    let weight_sum: f64 = w.iter().sum();

    let mut lambda = lambda;
    loop {
        match pool_precisions(fits, w, lambda) {
            Some((precision_sum, weighted_beta)) => {
                if let Some(pooled_cov) = linalg::spd_inverse(&precision_sum) {
                    let mean = &pooled_cov * weighted_beta;
                    let cov = pooled_cov * weight_sum;
                    return Ok(PriorSpec {
                        method: PriorMethod::Pwp,
                        mean,
                        cov,
                        schema_hash: Some(first.schema_hash.clone()),
                        seed: None,
                        provenance: Provenance {
                            sources: fits
                                .iter()
                                .enumerate()
                                .map(|(i, f)| quarter_label(f, i))
                                .collect(),
                            lambda: Some(lambda),
                            weights: weights.map(<[f64]>::to_vec),
                            matched: None,
                        },
                    });
                }
            }
            None => {}
        }
        if lambda >= 1.0 {
            return Err(Error::SingularAfterEscalation { lambda });
        }
        let next = (lambda * 10.0).clamp(f64::MIN_POSITIVE, 1.0);
        log::warn!("PWP: covariance not invertible at lambda = {lambda}, retrying with {next}");
        lambda = if lambda == 0.0 { DEFAULT_RIDGE_LAMBDA } else { next };
    }
}

fn pool_precisions(
    fits: &[CoefEstimate],
    weights: &[f64],
    lambda: f64,
) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let p = fits[0].dim();
    let mut precision_sum = DMatrix::zeros(p, p);
    let mut weighted_beta = DVector::zeros(p);
    for (fit, &w) in fits.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let stabilized = ridge_stabilize(&fit.cov, lambda).ok()?;
        let precision = linalg::spd_inverse(&stabilized)? * w;
        weighted_beta += &precision * &fit.beta;
        precision_sum += precision;
    }
    Some((precision_sum, weighted_beta))
}

fn single_quarter_provenance(fit: &CoefEstimate) -> Provenance {
    Provenance {
        sources: vec![quarter_label(fit, 0)],
        ..Provenance::default()
    }
}

/// The most recent quarter's estimate and full covariance, as-is.
pub fn last_prior(fit: &CoefEstimate) -> Result<PriorSpec> {
    fit.validate()?;
    let min_eig = linalg::min_eigenvalue(&fit.cov);
    if !(min_eig >= MIN_EIGENVALUE) {
        return Err(Error::NonPositiveDefinite(format!(
            "minimum eigenvalue {min_eig:e}"
        )));
    }
    if fit.cov.clone().cholesky().is_none() {
        return Err(Error::NonPositiveDefinite("Cholesky failed".into()));
    }
    Ok(PriorSpec {
        method: PriorMethod::Last,
        mean: fit.beta.clone(),
        cov: fit.cov.clone(),
        schema_hash: Some(fit.schema_hash.clone()),
        seed: None,
        provenance: single_quarter_provenance(fit),
    })
}

/// The most recent quarter's estimate with independent coefficients.
pub fn lastz_prior(fit: &CoefEstimate) -> Result<PriorSpec> {
    fit.validate()?;
    if let Some(i) = fit.cov.diagonal().iter().position(|&v| !(v > 0.0)) {
        return Err(Error::NonPositiveVariance(i));
    }
    Ok(PriorSpec {
        method: PriorMethod::Lastz,
        mean: fit.beta.clone(),
        cov: DMatrix::from_diagonal(&fit.cov.diagonal()),
        schema_hash: Some(fit.schema_hash.clone()),
        seed: None,
        provenance: single_quarter_provenance(fit),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Logit,
    Probit,
}

/// One coefficient reported by one published study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LitStudyEntry {
    pub study: String,
    pub year: i32,
    /// Coefficient name in the target schema.
    pub predictor: String,
    pub scale: Scale,
    pub estimate: f64,
    pub std_error: f64,
}

pub fn probit_to_logit(estimate: f64, std_error: f64) -> Result<(f64, f64)> {
    if !(std_error > 0.0) {
        return Err(Error::NonPositiveStdError(std_error));
    }
    Ok((PROBIT_TO_LOGIT * estimate, PROBIT_TO_LOGIT * std_error))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LitFallback {
    pub mean: f64,
    pub variance: f64,
}

impl Default for LitFallback {
    fn default() -> Self {
        LitFallback {
            mean: 0.0,
            variance: 10.0,
        }
    }
}

/// Per-coefficient pooling of literature estimates: mean of estimates and
/// mean of squared standard errors, independent across coefficients.
/// Coefficients with no evidence (including the intercept, unless an entry
/// names it) receive the fallback.
pub fn lit_prior(
    entries: &[LitStudyEntry],
    schema: &CovariateSchema,
    fallback: LitFallback,
) -> Result<PriorSpec> {
    let p = schema.coefficient_count();
    let mut sum_est = vec![0.0; p];
    let mut sum_var = vec![0.0; p];
    let mut count = vec![0usize; p];
    let mut studies = BTreeMap::new();
    for e in entries {
        let idx = schema
            .coefficient_index(&e.predictor)
            .ok_or_else(|| Error::UnknownPredictor(e.predictor.clone()))?;
        let (est, se) = match e.scale {
            Scale::Logit => {
                if !(e.std_error > 0.0) {
                    return Err(Error::NonPositiveStdError(e.std_error));
                }
                (e.estimate, e.std_error)
            }
            Scale::Probit => probit_to_logit(e.estimate, e.std_error)?,
        };
        sum_est[idx] += est;
        sum_var[idx] += se * se;
        count[idx] += 1;
        studies.insert(e.study.clone(), ());
    }
    let mut mean = DVector::from_element(p, fallback.mean);
    let mut var = DVector::from_element(p, fallback.variance);
    let mut matched = Vec::new();
    for c in 0..p {
        if count[c] > 0 {
            mean[c] = sum_est[c] / count[c] as f64;
            var[c] = sum_var[c] / count[c] as f64;
            matched.push(schema.coefficient_names()[c].clone());
        }
    }
    Ok(PriorSpec {
        method: PriorMethod::Lit,
        mean,
        cov: DMatrix::from_diagonal(&var),
        schema_hash: Some(schema.fingerprint()),
        seed: None,
        provenance: Provenance {
            sources: studies.into_keys().collect(),
            matched: Some(matched),
            ..Provenance::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Covariate;
    use proptest::prelude::*;

    fn scalar_fit(beta: f64, var: f64) -> CoefEstimate {
        CoefEstimate {
            format_version: FORMAT_VERSION,
            schema_hash: "s".into(),
            beta: DVector::from_vec(vec![beta]),
            cov: DMatrix::from_vec(1, 1, vec![var]),
            n_rows: 100,
            converged: true,
            loglik: -1.0,
            quarter: None,
            seed: None,
        }
    }

    fn fit(beta: &[f64], cov: &[f64]) -> CoefEstimate {
        let p = beta.len();
        CoefEstimate {
            beta: DVector::from_row_slice(beta),
            cov: DMatrix::from_row_slice(p, p, cov),
            ..scalar_fit(0.0, 1.0)
        }
    }

    #[test]
    fn standard_prior_shapes() {
        let p = standard_prior(3, STANDARD_VARIANCE).unwrap();
        assert_eq!(p.mean, DVector::zeros(3));
        assert_eq!(p.cov, DMatrix::identity(3, 3) * 1e6);
        let p = standard_prior(1, 4.0).unwrap();
        assert_eq!(p.cov[(0, 0)], 4.0);
        assert!(standard_prior(0, 1.0).is_err());
    }

    #[test]
    fn ridge_examples() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let r = ridge_stabilize(&v, 0.2).unwrap();
        assert_eq!(r, DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]));
        let r = ridge_stabilize(&v, DEFAULT_RIDGE_LAMBDA).unwrap();
        assert!((r[(0, 1)] - 0.5 * 0.997).abs() < 1e-15);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert_eq!(ridge_stabilize(&d, 0.7).unwrap(), d);
        assert_eq!(ridge_stabilize(&v, 0.0).unwrap(), v);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(ridge_stabilize(&asym, 0.1), Err(Error::AsymmetricInput)));
    }

    #[test]
    fn pwp_scalar_examples() {
        let p = pwp_prior(&[scalar_fit(1.0, 1.0), scalar_fit(3.0, 1.0)], 0.003, None).unwrap();
        assert!((p.mean[0] - 2.0).abs() < 1e-15);
        assert!((p.cov[(0, 0)] - 1.0).abs() < 1e-15);
        let p = pwp_prior(&[scalar_fit(1.0, 1.0), scalar_fit(3.0, 1.0 / 3.0)], 0.003, None).unwrap();
        assert!((p.mean[0] - 2.5).abs() < 1e-15);
        assert!((p.cov[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(p.provenance.lambda, Some(0.003));
    }

    #[test]
    fn pwp_identical_fits_return_the_fit() {
        let f = fit(&[0.3, -1.2], &[0.5, 0.1, 0.1, 0.2]);
        let p = pwp_prior(&vec![f.clone(); 8], 0.0, None).unwrap();
        assert!((p.mean.clone() - &f.beta).amax() < 1e-12);
        assert!((p.cov.clone() - &f.cov).amax() < 1e-12);
        assert_eq!(p.provenance.sources.len(), 8);
    }

    #[test]
    fn pwp_schema_mismatch_and_escalation() {
        let mut other = scalar_fit(1.0, 1.0);
        other.schema_hash = "t".into();
        assert!(matches!(
            pwp_prior(&[scalar_fit(1.0, 1.0), other], 0.003, None),
            Err(Error::SchemaMismatch(_))
        ));
        // rank-one covariance needs a larger ridge weight before it inverts
        let singular = fit(&[1.0, 1.0], &[1.0, 1.0, 1.0, 1.0]);
        let p = pwp_prior(&[singular.clone()], 0.0, None).unwrap();
        assert!(p.provenance.lambda.unwrap() > 0.0);
        assert!(p.cov.clone().cholesky().is_some());

        let zero = fit(&[1.0], &[0.0]);
        assert!(matches!(
            pwp_prior(&[zero], 0.003, None),
            Err(Error::SingularAfterEscalation { .. })
        ));
    }

    #[test]
    fn pwp_weights_drop_quarters() {
        let p = pwp_prior(
            &[scalar_fit(1.0, 1.0), scalar_fit(5.0, 2.0)],
            0.003,
            Some(&[1.0, 0.0]),
        )
        .unwrap();
        assert!((p.mean[0] - 1.0).abs() < 1e-15);
        assert!((p.cov[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn last_and_lastz() {
        let f = fit(&[0.2, 0.4], &[1.0, 0.9, 0.9, 1.0]);
        let last = last_prior(&f).unwrap();
        assert_eq!(last.mean, f.beta);
        assert_eq!(last.cov, f.cov);
        let z = lastz_prior(&f).unwrap();
        assert_eq!(z.cov, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));

        let diag = fit(&[0.2, 0.4], &[1.0, 0.0, 0.0, 2.0]);
        assert_eq!(lastz_prior(&diag).unwrap().cov, last_prior(&diag).unwrap().cov);

        let near_singular = fit(&[0.0, 0.0], &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(last_prior(&near_singular), Err(Error::NonPositiveDefinite(_))));
        assert!(lastz_prior(&near_singular).is_ok());

        let bad = fit(&[0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(lastz_prior(&bad), Err(Error::NonPositiveVariance(1))));

        let mut q = fit(&[0.0], &[1.0]);
        q.quarter = Some(8);
        assert_eq!(last_prior(&q).unwrap().provenance.sources, vec!["8".to_string()]);
    }

    #[test]
    fn probit_conversion() {
        let (e, s) = probit_to_logit(0.5, 0.1).unwrap();
        assert!((e - 0.805).abs() < 1e-15 && (s - 0.161).abs() < 1e-15);
        let (e, s) = probit_to_logit(0.0, 0.3).unwrap();
        assert_eq!(e, 0.0);
        assert!((s - 1.61 * 0.3).abs() < 1e-15);
        let (e, s) = probit_to_logit(-1.0, 0.2).unwrap();
        assert!((e + 1.61).abs() < 1e-15 && (s - 0.322).abs() < 1e-15);
        assert!(probit_to_logit(1.0, 0.0).is_err());
    }

    fn lit_schema() -> CovariateSchema {
        CovariateSchema::new(vec![Covariate::numeric("a"), Covariate::numeric("b")]).unwrap()
    }

    fn entry(study: &str, predictor: &str, scale: Scale, est: f64, se: f64) -> LitStudyEntry {
        LitStudyEntry {
            study: study.into(),
            year: 2010,
            predictor: predictor.into(),
            scale,
            estimate: est,
            std_error: se,
        }
    }

    #[test]
    fn lit_examples() {
        let entries = [
            entry("s1", "a", Scale::Logit, 0.2, 0.1),
            entry("s2", "a", Scale::Logit, 0.4, 0.03f64.sqrt()),
            entry("s3", "b", Scale::Probit, 0.5, 0.1),
        ];
        let p = lit_prior(&entries, &lit_schema(), LitFallback::default()).unwrap();
        assert_eq!((p.mean[0], p.cov[(0, 0)]), (0.0, 10.0));
        assert!((p.mean[1] - 0.3).abs() < 1e-15);
        assert!((p.cov[(1, 1)] - 0.02).abs() < 1e-15);
        assert!((p.mean[2] - 0.805).abs() < 1e-15);
        assert!((p.cov[(2, 2)] - 0.025921).abs() < 1e-15);
        assert_eq!(p.cov[(1, 2)], 0.0);

        let unknown = [entry("s1", "zzz", Scale::Logit, 0.2, 0.1)];
        assert!(matches!(
            lit_prior(&unknown, &lit_schema(), LitFallback::default()),
            Err(Error::UnknownPredictor(_))
        ));
    }

    #[test]
    fn prior_json_uses_diag_for_diagonal_cov() {
        let p = standard_prior(2, 4.0).unwrap();
        let json = serde_json::to_value(&p).unwrap();
        assert_eq!(json["diag"], serde_json::json!([4.0, 4.0]));
        assert!(json.get("cov").is_none());
        let back: PriorSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, p);

        let full = last_prior(&fit(&[0.1, 0.2], &[1.0, 0.3, 0.3, 2.0])).unwrap();
        let json = serde_json::to_value(&full).unwrap();
        assert!(json["cov"].is_array() && json.get("diag").is_none());
        assert_eq!(serde_json::from_value::<PriorSpec>(json).unwrap(), full);
    }

    fn spd_matrix(seed: &[f64], p: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p, |i, j| seed[(i * p + j) % seed.len()]);
        &a * a.transpose() + DMatrix::identity(p, p) * 0.5
    }

    proptest! {
        #[test]
        fn pwp_permutation_and_scale(
            vals in proptest::collection::vec(-1.0f64..1.0, 9),
            betas in proptest::collection::vec(-2.0f64..2.0, 9),
            k in 0.1f64..10.0,
        ) {
            let fits: Vec<CoefEstimate> = (0..3)
                .map(|q| {
                    let mut shifted = vals.clone();
                    shifted.rotate_left(q * 2);
                    CoefEstimate {
                        beta: DVector::from_row_slice(&betas[q * 3..q * 3 + 3]),
                        cov: spd_matrix(&shifted, 3),
                        ..scalar_fit(0.0, 1.0)
                    }
                })
                .collect();
            let base = pwp_prior(&fits, 0.003, None).unwrap();
            let mut reversed = fits.clone();
            reversed.reverse();
            let rev = pwp_prior(&reversed, 0.003, None).unwrap();
            prop_assert!((base.mean.clone() - rev.mean).amax() < 1e-9);
            prop_assert!((base.cov.clone() - rev.cov).amax() < 1e-9);

            let scaled: Vec<CoefEstimate> = fits
                .iter()
                .map(|f| CoefEstimate { cov: &f.cov * k, ..f.clone() })
                .collect();
            let s = pwp_prior(&scaled, 0.003, None).unwrap();
            prop_assert!((s.mean - &base.mean).amax() < 1e-9);
            prop_assert!((s.cov - &base.cov * k).amax() < 1e-9 * k.max(1.0) * base.cov.amax().max(1.0));
            prop_assert!(base.cov.clone().cholesky().is_some());
        }

        #[test]
        fn ridge_keeps_diagonal_and_symmetry(vals in proptest::collection::vec(-3.0f64..3.0, 16), lambda in 0.0f64..=1.0) {
            let v = spd_matrix(&vals, 4);
            let r = ridge_stabilize(&v, lambda).unwrap();
            prop_assert_eq!(r.diagonal(), v.diagonal());
            prop_assert!(linalg::is_symmetric(&r, 0.0));
        }

        #[test]
        fn lit_order_and_split_invariance(
            raw in proptest::collection::vec((0usize..2, -1.0f64..1.0, 0.01f64..1.0, any::<bool>()), 1..12),
            split in 0usize..12,
        ) {
            let names = ["a", "b"];
            let entries: Vec<LitStudyEntry> = raw
                .iter()
                .enumerate()
                .map(|(i, &(c, e, s, probit))| entry(
                    &format!("s{i}"),
                    names[c],
                    if probit { Scale::Probit } else { Scale::Logit },
                    e,
                    s,
                ))
                .collect();
            let schema = lit_schema();
            let base = lit_prior(&entries, &schema, LitFallback::default()).unwrap();
            let mut rev = entries.clone();
            rev.reverse();
            let r = lit_prior(&rev, &schema, LitFallback::default()).unwrap();
            prop_assert!((base.mean.clone() - r.mean).amax() < 1e-12);
            prop_assert!((base.cov.clone() - r.cov).amax() < 1e-12);
            let cut = split.min(entries.len());
            let mut joined = entries[..cut].to_vec();
            joined.extend_from_slice(&entries[cut..]);
            let j = lit_prior(&joined, &schema, LitFallback::default()).unwrap();
            prop_assert_eq!(j.mean, base.mean);
            prop_assert!(base.cov.clone().cholesky().is_some());
        }

        #[test]
        fn lastz_always_pd_with_positive_diagonal(
            vals in proptest::collection::vec(-1.0f64..1.0, 4),
            diag in proptest::collection::vec(1e-6f64..5.0, 4),
        ) {
            // rank-one plus positive diagonal: arbitrary near-singular PSD input
            let u = DVector::from_row_slice(&vals);
            let mut cov = &u * u.transpose() * 1e6;
            for i in 0..4 { cov[(i, i)] += diag[i]; }
            let f = CoefEstimate {
                beta: DVector::zeros(4),
                cov,
                ..scalar_fit(0.0, 1.0)
            };
            let p = lastz_prior(&f).unwrap();
            prop_assert!(p.cov.cholesky().is_some());
        }
    }
}
