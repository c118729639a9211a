//! Synthetic multi-quarter call-attempt data with known coefficients.
//!
//! Cases enter the field on a uniform day, then receive attempts at
//! geometric gaps until they complete the screener, reach the attempt cap
//! or run out of quarter. Every attempt succeeds with the logistic
//! probability of the true coefficients applied to its design row, whose
//! paradata columns are derived from the case's own earlier attempts.
//!
//! All uniforms are drawn up front per case, so the realized data are a
//! monotone function of the intercept; the target response rate is hit by
//! bisecting an intercept shift against the realized case-level rate.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::RunMeta;
use crate::model::{
    self, inverse_logit, CallRecord, Covariate, CovariateSchema, CovariateValue,
};
use crate::rsd::QuarterData;
use crate::seed::{derive_seed, rng_from, stream};
use crate::FORMAT_VERSION;

pub const PREV_CONTACT: &str = "prev_contact";
pub const LOG_CALLS: &str = "log_calls";
pub const DAY_OF_QUARTER: &str = "day_of_quarter";
pub const PHASE2: &str = "phase2";

/// Case-level covariate generators. Values are drawn once per case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StaticCovariate {
    /// Standard normal.
    Normal { name: String },
    /// 0/1 indicator with success probability `p`.
    Binary { name: String, p: f64 },
    Categorical {
        name: String,
        levels: Vec<String>,
        probs: Vec<f64>,
        reference: String,
    },
    /// `corr * of + sqrt(1 - corr^2) * z`, with `of` an earlier normal column.
    CorrelatedNormal { name: String, of: String, corr: f64 },
    /// Copies the earlier binary column `of` with probability `corr`, else
    /// redraws it independently; the correlation is `corr`.
    CorrelatedBinary { name: String, of: String, corr: f64 },
}

impl StaticCovariate {
    pub fn name(&self) -> &str {
        match self {
            StaticCovariate::Normal { name }
            | StaticCovariate::Binary { name, .. }
            | StaticCovariate::Categorical { name, .. }
            | StaticCovariate::CorrelatedNormal { name, .. }
            | StaticCovariate::CorrelatedBinary { name, .. } => name,
        }
    }
}

/// Which history-derived paradata columns enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicColumns {
    /// Any earlier attempt reached a household member.
    pub prev_contact: bool,
    /// `ln(attempt index)`.
    pub log_calls: bool,
    pub day_of_quarter: bool,
    /// Day falls in the second phase.
    pub phase2: bool,
}

impl DynamicColumns {
    pub fn all() -> Self {
        DynamicColumns {
            prev_contact: true,
            log_calls: true,
            day_of_quarter: true,
            phase2: true,
        }
    }

    pub fn none() -> Self {
        DynamicColumns {
            prev_contact: false,
            log_calls: false,
            day_of_quarter: false,
            phase2: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSchema {
    pub static_covariates: Vec<StaticCovariate>,
    pub dynamic: DynamicColumns,
    /// Chance that a non-final attempt makes contact.
    pub contact_prob: f64,
}

impl SimSchema {
    /// Twelve coefficients: intercept, three normals, a four-level region,
    /// an urbanicity indicator and the four paradata columns.
    pub fn desk() -> Self {
        SimSchema {
            static_covariates: vec![
                StaticCovariate::Normal { name: "x1".into() },
                StaticCovariate::Normal { name: "x2".into() },
                StaticCovariate::Normal { name: "x3".into() },
                StaticCovariate::Categorical {
                    name: "region".into(),
                    levels: ["n", "s", "e", "w"].map(String::from).to_vec(),
                    probs: vec![0.25, 0.3, 0.2, 0.25],
                    reference: "n".into(),
                },
                StaticCovariate::Binary {
                    name: "urban".into(),
                    p: 0.6,
                },
            ],
            dynamic: DynamicColumns::all(),
            contact_prob: 0.4,
        }
    }

    pub fn covariate_schema(&self) -> Result<CovariateSchema> {
        let mut entries: Vec<Covariate> = self
            .static_covariates
            .iter()
            .map(|c| match c {
                StaticCovariate::Categorical {
                    name,
                    levels,
                    reference,
                    ..
                } => Covariate::categorical(name.clone(), levels.clone(), reference.clone()),
                other => Covariate::numeric(other.name()),
            })
            .collect();
        let d = self.dynamic;
        for (on, name) in [
            (d.prev_contact, PREV_CONTACT),
            (d.log_calls, LOG_CALLS),
            (d.day_of_quarter, DAY_OF_QUARTER),
            (d.phase2, PHASE2),
        ] {
            if on {
                entries.push(Covariate::numeric(name));
            }
        }
        CovariateSchema::new(entries)
    }

    fn validate(&self) -> Result<()> {
        let mut seen: Vec<(&str, &StaticCovariate)> = Vec::new();
        let find = |seen: &[(&str, &StaticCovariate)], of: &str| {
            seen.iter().find(|(n, _)| *n == of).map(|(_, c)| (*c).clone())
        };
        for c in &self.static_covariates {
            match c {
                StaticCovariate::Binary { p, .. } if !(0.0..=1.0).contains(p) => {
                    return Err(Error::InvalidConfig(format!("`{}`: p outside [0, 1]", c.name())))
                }
                StaticCovariate::Categorical { levels, probs, .. } => {
                    if levels.len() != probs.len()
                        || probs.iter().any(|&p| p < 0.0)
                        || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
                    {
                        return Err(Error::InvalidConfig(format!(
                            "`{}`: level probabilities must match levels and sum to 1",
                            c.name()
                        )));
                    }
                }
                StaticCovariate::CorrelatedNormal { of, corr, .. } => {
                    if !matches!(find(&seen, of), Some(StaticCovariate::Normal { .. } | StaticCovariate::CorrelatedNormal { .. }))
                        || !(-1.0..=1.0).contains(corr)
                    {
                        return Err(Error::InvalidConfig(format!(
                            "`{}` must follow a normal column and have |corr| <= 1",
                            c.name()
                        )));
                    }
                }
                StaticCovariate::CorrelatedBinary { of, corr, .. } => {
                    if !matches!(find(&seen, of), Some(StaticCovariate::Binary { .. }))
                        || !(0.0..=1.0).contains(corr)
                    {
                        return Err(Error::InvalidConfig(format!(
                            "`{}` must follow a binary column and have corr in [0, 1]",
                            c.name()
                        )));
                    }
                }
                _ => {}
            }
            seen.push((c.name(), c));
        }
        if !(0.0..=1.0).contains(&self.contact_prob) {
            return Err(Error::InvalidConfig("contact_prob outside [0, 1]".into()));
        }
        self.covariate_schema().map(|_| ())
    }

    fn draw_static(&self, rng: &mut ChaCha8Rng) -> BTreeMap<String, CovariateValue> {
        let mut out: BTreeMap<String, CovariateValue> = BTreeMap::new();
        let number = |out: &BTreeMap<String, CovariateValue>, of: &str| match out.get(of) {
            Some(CovariateValue::Number(v)) => *v,
            _ => unreachable!("validated source column"),
        };
        for c in &self.static_covariates {
            let value = match c {
                StaticCovariate::Normal { .. } => CovariateValue::Number(rng.sample(StandardNormal)),
                StaticCovariate::Binary { p, .. } => {
                    CovariateValue::Number(if rng.gen::<f64>() < *p { 1.0 } else { 0.0 })
                }
                StaticCovariate::Categorical { levels, probs, .. } => {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut pick = levels.len() - 1;
                    for (i, p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    CovariateValue::Level(levels[pick].clone())
                }
                StaticCovariate::CorrelatedNormal { of, corr, .. } => {
                    let z: f64 = rng.sample(StandardNormal);
                    CovariateValue::Number(corr * number(&out, of) + (1.0 - corr * corr).sqrt() * z)
                }
                StaticCovariate::CorrelatedBinary { of, corr, .. } => {
                    let source = number(&out, of);
                    let p = self
                        .static_covariates
                        .iter()
                        .find_map(|s| match s {
                            StaticCovariate::Binary { name, p } if name == of => Some(*p),
                            _ => None,
                        })
                        .unwrap_or(0.5);
                    let copy = rng.gen::<f64>() < *corr;
                    let fresh = if rng.gen::<f64>() < p { 1.0 } else { 0.0 };
                    CovariateValue::Number(if copy { source } else { fresh })
                }
            };
            out.insert(c.name().to_string(), value);
        }
        out
    }
}

/// One earlier attempt of a case, as seen by later attempts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorAttempt {
    pub day: u32,
    pub contact: bool,
}

/// Case covariates and attempt history up to (not including) the attempt
/// being scored.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseHistory {
    pub covariates: BTreeMap<String, CovariateValue>,
    pub prior_attempts: Vec<PriorAttempt>,
}

impl CaseHistory {
    /// Full covariate map for the next attempt on `day`.
    pub fn attempt_covariates(
        &self,
        schema: &SimSchema,
        day: u32,
        phase2_start: u32,
    ) -> BTreeMap<String, CovariateValue> {
        let mut covs = self.covariates.clone();
        let d = schema.dynamic;
        let attempt = self.prior_attempts.len() + 1;
        if d.prev_contact {
            let any = self.prior_attempts.iter().any(|a| a.contact);
            covs.insert(PREV_CONTACT.into(), CovariateValue::Number(f64::from(u8::from(any))));
        }
        if d.log_calls {
            covs.insert(LOG_CALLS.into(), CovariateValue::Number((attempt as f64).ln()));
        }
        if d.day_of_quarter {
            covs.insert(DAY_OF_QUARTER.into(), CovariateValue::Number(f64::from(day)));
        }
        if d.phase2 {
            let on = day >= phase2_start;
            covs.insert(PHASE2.into(), CovariateValue::Number(f64::from(u8::from(on))));
        }
        covs
    }
}

/// True success probability of the next attempt of a case on `day`.
pub fn true_propensity(
    schema: &SimSchema,
    history: &CaseHistory,
    day: u32,
    phase2_start: u32,
    true_beta: &[f64],
) -> Result<f64> {
    let cs = schema.covariate_schema()?;
    let record = CallRecord {
        quarter: 0,
        case_id: String::new(),
        day,
        attempt: history.prior_attempts.len() as u32 + 1,
        outcome: false,
        covariates: history.attempt_covariates(schema, day, phase2_start),
    };
    let row = model::build_design_row(&record, &cs)?;
    if row.len() != true_beta.len() {
        return Err(Error::DimensionMismatch {
            expected: row.len(),
            found: true_beta.len(),
        });
    }
    Ok(inverse_logit(model::dot(true_beta, &row)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_quarters: usize,
    pub cases_per_quarter: usize,
    pub quarter_length: u32,
    pub phase2_start: u32,
    pub schema: SimSchema,
    /// Coefficients in the layout of `schema.covariate_schema()`.
    pub true_beta: Vec<f64>,
    pub max_attempts_per_case: u32,
    /// Mean days between attempts (geometric on `1, 2, ...`).
    pub attempt_gap: f64,
    /// Last possible entry day; defaults to the day before the second phase.
    #[serde(default)]
    pub entry_window: Option<u32>,
    /// Case-level response rate to calibrate the intercept to.
    #[serde(default)]
    pub target_rr: Option<f64>,
    /// Per-quarter normal perturbation sd on the non-intercept coefficients.
    #[serde(default)]
    pub drift: f64,
    #[serde(default = "one")]
    pub first_quarter: i64,
    pub seed: u64,
}

fn one() -> i64 {
    1
}

pub const DESK_CASES_PER_QUARTER: usize = 640;
pub const DEFAULT_TARGET_RR: f64 = 0.89;

impl SimConfig {
    /// About 2,000 attempts per quarter over the twelve-coefficient desk
    /// schema, with the intercept calibrated to a 0.89 response rate.
    pub fn desk(n_quarters: usize, seed: u64) -> Self {
        SimConfig {
            n_quarters,
            cases_per_quarter: DESK_CASES_PER_QUARTER,
            quarter_length: 84,
            phase2_start: 71,
            schema: SimSchema::desk(),
            true_beta: desk_true_beta(),
            max_attempts_per_case: 12,
            attempt_gap: 5.0,
            entry_window: None,
            target_rr: Some(DEFAULT_TARGET_RR),
            drift: 0.0,
            first_quarter: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.n_quarters == 0 || self.cases_per_quarter == 0 {
            return bad("need at least one quarter and one case");
        }
        if self.phase2_start < 1 || self.phase2_start > self.quarter_length {
            return bad("phase2_start outside 1..=quarter_length");
        }
        if self.max_attempts_per_case == 0 {
            return bad("max_attempts_per_case must be positive");
        }
        if !(self.attempt_gap >= 1.0) {
            return bad("attempt_gap must be at least 1 day");
        }
        if let Some(w) = self.entry_window {
            if w < 1 || w > self.quarter_length {
                return bad("entry_window outside 1..=quarter_length");
            }
        }
        if let Some(t) = self.target_rr {
            if !(t > 0.0 && t < 1.0) {
                return bad("target_rr must lie in (0, 1)");
            }
        }
        if !(self.drift >= 0.0) {
            return bad("drift must be non-negative");
        }
        self.schema.validate()?;
        let p = self.schema.covariate_schema()?.coefficient_count();
        if self.true_beta.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: self.true_beta.len(),
            });
        }
        Ok(())
    }

    fn entry_last(&self) -> u32 {
        self.entry_window
            .unwrap_or_else(|| self.phase2_start.saturating_sub(1).max(1))
    }
}

/// Coefficients for [`SimSchema::desk`]; the intercept is a starting value
/// that calibration replaces.
pub fn desk_true_beta() -> Vec<f64> {
    vec![
        -1.2,   // intercept
        0.3,    // x1
        -0.2,   // x2
        0.15,   // x3
        0.2,    // region=s
        -0.15,  // region=e
        0.1,    // region=w
        -0.25,  // urban
        0.4,    // prev_contact
        -0.5,   // log_calls
        -0.004, // day_of_quarter
        0.6,    // phase2
    ]
}

/// Per-case draws fixed before any outcome is decided.
struct CasePlan {
    case_id: String,
    covariates: BTreeMap<String, CovariateValue>,
    days: Vec<u32>,
    contact_u: Vec<f64>,
    outcome_u: Vec<f64>,
}

struct QuarterPlan {
    quarter: i64,
    beta: Vec<f64>,
    cases: Vec<CasePlan>,
}

fn plan_quarter(cfg: &SimConfig, index: usize) -> Result<QuarterPlan> {
    let quarter = cfg.first_quarter + index as i64;
    let mut rng = rng_from(derive_seed(cfg.seed, &[stream::SIMULATE, index as u64]));
    let mut beta = cfg.true_beta.clone();
    if cfg.drift > 0.0 {
        for b in beta.iter_mut().skip(1) {
            *b += cfg.drift * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let gap = Geometric::new(1.0 / cfg.attempt_gap)
        .map_err(|e| Error::InvalidConfig(format!("attempt gap: {e}")))?;
    let entry_last = cfg.entry_last();
    let cases = (0..cfg.cases_per_quarter)
        .map(|i| {
            let covariates = cfg.schema.draw_static(&mut rng);
            let mut days = Vec::new();
            let mut day = rng.gen_range(1..=entry_last);
            for _ in 0..cfg.max_attempts_per_case {
                days.push(day);
                day = day.saturating_add(1 + gap.sample(&mut rng).min(u64::from(u32::MAX)) as u32);
            }
            days.retain(|&d| d <= cfg.quarter_length);
            let k = cfg.max_attempts_per_case as usize;
            let contact_u = (0..k).map(|_| rng.gen()).collect();
            let outcome_u = (0..k).map(|_| rng.gen()).collect();
            CasePlan {
                case_id: format!("q{quarter}-c{i:05}"),
                covariates,
                days,
                contact_u,
                outcome_u,
            }
        })
        .collect();
    Ok(QuarterPlan {
        quarter,
        beta,
        cases,
    })
}

struct RealizedAttempt {
    record: CallRecord,
    propensity: f64,
}

fn realize_case(
    cfg: &SimConfig,
    schema: &CovariateSchema,
    plan: &CasePlan,
    quarter: i64,
    beta: &[f64],
    intercept_shift: f64,
    mut sink: Option<&mut Vec<RealizedAttempt>>,
) -> Result<bool> {
    let mut history = CaseHistory {
        covariates: plan.covariates.clone(),
        prior_attempts: Vec::new(),
    };
    for (k, &day) in plan.days.iter().enumerate() {
        let covariates = history.attempt_covariates(&cfg.schema, day, cfg.phase2_start);
        let mut record = CallRecord {
            quarter,
            case_id: plan.case_id.clone(),
            day,
            attempt: k as u32 + 1,
            outcome: false,
            covariates,
        };
        let row = model::build_design_row(&record, schema)?;
        let p = inverse_logit(model::dot(beta, &row) + intercept_shift);
        let success = plan.outcome_u[k] < p;
        record.outcome = success;
        if let Some(out) = sink.as_deref_mut() {
            out.push(RealizedAttempt {
                record,
                propensity: p,
            });
        }
        if success {
            return Ok(true);
        }
        history.prior_attempts.push(PriorAttempt {
            day,
            contact: plan.contact_u[k] < cfg.schema.contact_prob,
        });
    }
    Ok(false)
}

fn response_rate(cfg: &SimConfig, schema: &CovariateSchema, plans: &[QuarterPlan], shift: f64) -> Result<f64> {
    let mut responded = 0usize;
    let mut total = 0usize;
    for q in plans {
        for case in &q.cases {
            responded += realize_case(cfg, schema, case, q.quarter, &q.beta, shift, None)? as usize;
            total += 1;
        }
    }
    Ok(responded as f64 / total as f64)
}

const CALIBRATION_TOL: f64 = 0.005;

fn calibrate_shift(cfg: &SimConfig, schema: &CovariateSchema, plans: &[QuarterPlan], target: f64) -> Result<f64> {
    let (mut lo, mut hi) = (-20.0, 20.0);
    let r_lo = response_rate(cfg, schema, plans, lo)?;
    let r_hi = response_rate(cfg, schema, plans, hi)?;
    if target < r_lo - CALIBRATION_TOL || target > r_hi + CALIBRATION_TOL {
        return Err(Error::CalibrationFailed(format!(
            "target {target} outside reachable range [{r_lo:.4}, {r_hi:.4}]"
        )));
    }
    let mut best = (f64::INFINITY, 0.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let r = response_rate(cfg, schema, plans, mid)?;
        if (r - target).abs() < best.0 {
            best = ((r - target).abs(), mid);
        }
        if r < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    if best.0 > CALIBRATION_TOL {
        return Err(Error::CalibrationFailed(format!(
            "closest response rate is {:.4} away from {target}",
            best.0
        )));
    }
    Ok(best.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarterTruth {
    pub quarter: i64,
    pub beta: Vec<f64>,
}

/// Ground truth written next to simulated data (`truth.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub format_version: u32,
    pub seed: u64,
    pub schema_hash: String,
    pub coefficient_names: Vec<String>,
    /// Intercept shift found by calibration (already folded into `beta`).
    pub intercept_shift: f64,
    pub response_rate: f64,
    pub quarters: Vec<QuarterTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruePropensity {
    pub quarter: i64,
    pub case_id: String,
    pub attempt: u32,
    pub day: u32,
    pub p: f64,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub schema: Arc<CovariateSchema>,
    pub records: Vec<CallRecord>,
    pub quarters: Vec<QuarterData>,
    pub truth: Truth,
    pub propensities: Vec<TruePropensity>,
}

impl Simulation {
    pub fn true_beta(&self, quarter: i64) -> Option<&[f64]> {
        self.truth
            .quarters
            .iter()
            .find(|q| q.quarter == quarter)
            .map(|q| q.beta.as_slice())
    }

    pub fn run_meta(&self) -> RunMeta {
        RunMeta::new(self.truth.schema_hash.clone(), Some(self.truth.seed))
    }

    /// Metadata line, then `quarter,case_id,attempt,day,p`.
    pub fn write_propensity_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "{}", self.run_meta().header_line())
            .map_err(|e| Error::io("truth_propensity.csv", e))?;
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["quarter", "case_id", "attempt", "day", "p"])?;
        for t in &self.propensities {
            w.write_record([
                t.quarter.to_string(),
                t.case_id.clone(),
                t.attempt.to_string(),
                t.day.to_string(),
                t.p.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("truth_propensity.csv", e))?;
        Ok(())
    }
}

pub fn simulate_quarters(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let schema = Arc::new(cfg.schema.covariate_schema()?);
    let plans = (0..cfg.n_quarters)
        .map(|i| plan_quarter(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let shift = match cfg.target_rr {
        Some(target) => calibrate_shift(cfg, &schema, &plans, target)?,
        None => 0.0,
    };

    let mut records = Vec::new();
    let mut quarters = Vec::with_capacity(plans.len());
    let mut propensities = Vec::new();
    let mut truths = Vec::with_capacity(plans.len());
    let mut responded = 0usize;
    let mut cases = 0usize;
    for plan in &plans {
        let mut realized = Vec::new();
        for case in &plan.cases {
            responded +=
                realize_case(cfg, &schema, case, plan.quarter, &plan.beta, shift, Some(&mut realized))?
                    as usize;
            cases += 1;
        }
        let mut quarter_records = Vec::with_capacity(realized.len());
        for a in realized {
            propensities.push(TruePropensity {
                quarter: plan.quarter,
                case_id: a.record.case_id.clone(),
                attempt: a.record.attempt,
                day: a.record.day,
                p: a.propensity,
            });
            quarter_records.push(a.record);
        }
        let qd = QuarterData::new(
            plan.quarter,
            quarter_records,
            cfg.quarter_length,
            Arc::clone(&schema),
        )?;
        records.extend(qd.records().iter().cloned());
        quarters.push(qd);
        let mut beta = plan.beta.clone();
        beta[0] += shift;
        truths.push(QuarterTruth {
            quarter: plan.quarter,
            beta,
        });
    }
    Ok(Simulation {
        truth: Truth {
            format_version: FORMAT_VERSION,
            seed: cfg.seed,
            schema_hash: schema.fingerprint(),
            coefficient_names: schema.coefficient_names().to_vec(),
            intercept_shift: shift,
            response_rate: responded as f64 / cases as f64,
            quarters: truths,
        },
        schema,
        records,
        quarters,
        propensities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept_only(beta0: f64, cases: usize, attempts: u32) -> SimConfig {
        SimConfig {
            n_quarters: 1,
            cases_per_quarter: cases,
            schema: SimSchema {
                static_covariates: vec![],
                dynamic: DynamicColumns::none(),
                contact_prob: 0.0,
            },
            true_beta: vec![beta0],
            max_attempts_per_case: attempts,
            target_rr: None,
            ..SimConfig::desk(1, 3)
        }
    }

    #[test]
    fn intercept_only_success_rate() {
        let sim = simulate_quarters(&intercept_only((0.25f64 / 0.75).ln(), 10_000, 1)).unwrap();
        let rate = sim.records.iter().filter(|r| r.outcome).count() as f64 / sim.records.len() as f64;
        assert_eq!(sim.records.len(), 10_000);
        assert!((rate - 0.25).abs() < 0.015, "{rate}");
    }

    #[test]
    fn histories_are_well_formed() {
        let sim = simulate_quarters(&SimConfig::desk(2, 11)).unwrap();
        let mut by_case: BTreeMap<&str, Vec<&CallRecord>> = BTreeMap::new();
        for r in &sim.records {
            assert!(r.day >= 1 && r.day <= 84);
            by_case.entry(&r.case_id).or_default().push(r);
        }
        for attempts in by_case.values_mut() {
            attempts.sort_by_key(|r| r.attempt);
            for (i, r) in attempts.iter().enumerate() {
                assert_eq!(r.attempt as usize, i + 1);
                assert!(!r.outcome || i + 1 == attempts.len());
            }
        }
        assert_eq!(sim.propensities.len(), sim.records.len());
        assert!((sim.truth.response_rate - 0.89).abs() <= 0.005);
    }

    #[test]
    fn deterministic_by_seed() {
        let a = simulate_quarters(&SimConfig::desk(1, 5)).unwrap();
        let b = simulate_quarters(&SimConfig::desk(1, 5)).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.truth, b.truth);
        let c = simulate_quarters(&SimConfig::desk(1, 6)).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn zero_beta_gives_half() {
        let schema = SimSchema::desk();
        let p = schema.covariate_schema().unwrap().coefficient_count();
        let history = CaseHistory {
            covariates: [
                ("x1", CovariateValue::Number(0.3)),
                ("x2", CovariateValue::Number(-1.0)),
                ("x3", CovariateValue::Number(2.0)),
                ("region", CovariateValue::Level("e".into())),
                ("urban", CovariateValue::Number(1.0)),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
            prior_attempts: vec![PriorAttempt { day: 60, contact: true }],
        };
        assert_eq!(true_propensity(&schema, &history, 65, 71, &vec![0.0; p]).unwrap(), 0.5);

        // only the phase-2 coefficient is non-zero
        let mut beta = vec![0.0; p];
        beta[p - 1] = 0.8;
        let d70 = true_propensity(&schema, &history, 70, 71, &beta).unwrap();
        let d71 = true_propensity(&schema, &history, 71, 71, &beta).unwrap();
        assert!(d71 > d70);
    }

    #[test]
    fn unreachable_target_fails() {
        // a single case responds or not, so 0.5 is out of reach
        let late = SimConfig {
            target_rr: Some(0.5),
            cases_per_quarter: 1,
            ..intercept_only(0.0, 1, 1)
        };
        assert!(matches!(simulate_quarters(&late), Err(Error::CalibrationFailed(_))));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = SimConfig::desk(1, 1);
        cfg.phase2_start = 90;
        assert!(matches!(simulate_quarters(&cfg), Err(Error::InvalidConfig(_))));
        let mut cfg = SimConfig::desk(1, 1);
        cfg.true_beta.pop();
        assert!(matches!(simulate_quarters(&cfg), Err(Error::DimensionMismatch { .. })));
        let mut cfg = SimConfig::desk(1, 1);
        cfg.target_rr = Some(1.0);
        assert!(simulate_quarters(&cfg).is_err());
    }

    #[test]
    fn correlated_binary_twin() {
        let schema = SimSchema {
            static_covariates: vec![
                StaticCovariate::Binary { name: "a".into(), p: 0.5 },
                StaticCovariate::CorrelatedBinary { name: "b".into(), of: "a".into(), corr: 0.9 },
            ],
            dynamic: DynamicColumns::none(),
            contact_prob: 0.0,
        };
        schema.validate().unwrap();
        let mut rng = rng_from(1);
        let n = 20_000;
        let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let v = schema.draw_static(&mut rng);
            let (CovariateValue::Number(a), CovariateValue::Number(b)) = (&v["a"], &v["b"]) else {
                panic!()
            };
            sa += a;
            sb += b;
            sab += a * b;
        }
        let (ma, mb) = (sa / n as f64, sb / n as f64);
        let corr = (sab / n as f64 - ma * mb) / (ma * (1.0 - ma) * mb * (1.0 - mb)).sqrt();
        assert!((corr - 0.9).abs() < 0.02, "{corr}");
    }
}
