//! Daily evaluation of Bayesian propensity predictions within a quarter.
//!
//! For each day from `start_day` on, the model is refit by MCMC on the
//! cumulative attempts, every attempt made that day gets a posterior-mean
//! prediction, and the predictions are compared against the case's
//! end-of-quarter benchmark (MLE on the whole quarter, evaluated at the
//! case's last attempt). Per-day bias, its standard error and RMSE follow.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::{posterior_mean_prediction, sample_posterior, McmcConfig};
use crate::mle::{fit_mle, CoefEstimate, MleOptions};
use crate::model::{self, inverse_logit, CallRecord, CovariateSchema, Dataset};
use crate::priors::PriorSpec;
use crate::seed::{derive_seed, stream};

pub const DEFAULT_QUARTER_LENGTH: u32 = 84;
pub const DEFAULT_START_DAY: u32 = 7;
pub const DEFAULT_WINDOWS: [(u32, u32); 3] = [(7, 30), (31, 60), (61, 84)];

/// One quarter of call records, sorted by (day, case, attempt), with the
/// matching design rows.
#[derive(Debug, Clone)]
pub struct QuarterData {
    quarter_id: i64,
    quarter_length: u32,
    records: Vec<CallRecord>,
    data: Dataset,
}

impl QuarterData {
    pub fn new(
        quarter_id: i64,
        mut records: Vec<CallRecord>,
        quarter_length: u32,
        schema: Arc<CovariateSchema>,
    ) -> Result<Self> {
        if quarter_length == 0 {
            return Err(Error::InvalidConfig("quarter length must be positive".into()));
        }
        for r in &records {
            if r.quarter != quarter_id {
                return Err(Error::InvalidRecord(format!(
                    "record of quarter {} in quarter {quarter_id}",
                    r.quarter
                )));
            }
            if r.day < 1 || r.day > quarter_length {
                return Err(Error::InvalidRecord(format!(
                    "case {} attempt {}: day {} outside 1..={quarter_length}",
                    r.case_id, r.attempt, r.day
                )));
            }
        }
        validate_case_histories(&records)?;
        records.sort_by(|a, b| {
            (a.day, &a.case_id, a.attempt).cmp(&(b.day, &b.case_id, b.attempt))
        });
        let data = Dataset::from_records(schema, &records)?;
        Ok(QuarterData {
            quarter_id,
            quarter_length,
            records,
            data,
        })
    }

    pub fn quarter_id(&self) -> i64 {
        self.quarter_id
    }

    pub fn quarter_length(&self) -> u32 {
        self.quarter_length
    }

    pub fn records(&self) -> &[CallRecord] {
        &self.records
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn schema(&self) -> &Arc<CovariateSchema> {
        self.data.schema()
    }

    /// Row indices of the attempts made on day `d`.
    pub fn day_rows(&self, d: u32) -> Range<usize> {
        let start = self.records.partition_point(|r| r.day < d);
        let end = self.records.partition_point(|r| r.day <= d);
        start..end
    }

    /// Attempts made on days `<= d`, as a dataset.
    pub fn cumulative(&self, d: u32) -> Dataset {
        self.data.prefix(self.day_rows(d).end)
    }
}

fn validate_case_histories(records: &[CallRecord]) -> Result<()> {
    let mut by_case: BTreeMap<&str, Vec<&CallRecord>> = BTreeMap::new();
    for r in records {
        by_case.entry(&r.case_id).or_default().push(r);
    }
    for (case, mut attempts) in by_case {
        attempts.sort_by_key(|r| r.attempt);
        for pair in attempts.windows(2) {
            if pair[1].attempt == pair[0].attempt || pair[1].day < pair[0].day {
                return Err(Error::InvalidRecord(format!(
                    "case {case}: attempts not strictly increasing in (day, attempt)"
                )));
            }
        }
        if let Some(pos) = attempts.iter().position(|r| r.outcome) {
            if pos + 1 != attempts.len() {
                return Err(Error::InvalidRecord(format!(
                    "case {case}: attempts recorded after a completed screener"
                )));
            }
        }
        if attempts.first().is_some_and(|r| r.attempt < 1) {
            return Err(Error::InvalidRecord(format!(
                "case {case}: attempt indices start at 1"
            )));
        }
    }
    Ok(())
}

/// Group records by quarter id, in ascending quarter order.
pub fn split_quarters(
    records: Vec<CallRecord>,
    schema: Arc<CovariateSchema>,
    quarter_length: u32,
) -> Result<Vec<QuarterData>> {
    let mut by_quarter: BTreeMap<i64, Vec<CallRecord>> = BTreeMap::new();
    for r in records {
        by_quarter.entry(r.quarter).or_default().push(r);
    }
    by_quarter
        .into_iter()
        .map(|(q, recs)| QuarterData::new(q, recs, quarter_length, Arc::clone(&schema)))
        .collect()
}

/// End-of-quarter fit and each case's predicted probability at its last attempt.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub fit: CoefEstimate,
    pub probs: BTreeMap<String, f64>,
}

pub fn benchmark_predictions(q: &QuarterData) -> Result<Benchmark> {
    let mut fit = fit_mle(q.dataset(), &MleOptions::default())?;
    fit.quarter = Some(q.quarter_id);
    if !fit.converged {
        log::warn!(
            "quarter {}: benchmark fit did not converge, using penalized estimate",
            q.quarter_id
        );
    }
    let mut last_row: BTreeMap<&str, (u32, usize)> = BTreeMap::new();
    for (i, r) in q.records.iter().enumerate() {
        let slot = last_row.entry(&r.case_id).or_insert((r.attempt, i));
        if r.attempt >= slot.0 {
            *slot = (r.attempt, i);
        }
    }
    let probs = last_row
        .into_iter()
        .map(|(case, (_, i))| {
            let eta = model::dot(fit.beta.as_slice(), q.data.row(i));
            (case.to_string(), inverse_logit(eta))
        })
        .collect();
    Ok(Benchmark { fit, probs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptPrediction {
    pub day: u32,
    pub case_id: String,
    pub attempt: u32,
    pub prob: f64,
}

/// Posterior-mean predictions for every attempt made on day `d`, from a
/// posterior fit to the attempts on days `<= d` (or `< d` when
/// `exclude_current_day`). Uses `cfg.seed` as given.
pub fn daily_predictions(
    q: &QuarterData,
    prior: &PriorSpec,
    d: u32,
    cfg: &McmcConfig,
    exclude_current_day: bool,
) -> Result<Vec<AttemptPrediction>> {
    let today = q.day_rows(d);
    if today.is_empty() {
        return Err(Error::NoAttemptsThatDay(d));
    }
    let fit_rows = if exclude_current_day { today.start } else { today.end };
    let data = q.data.prefix(fit_rows);
    let draws = sample_posterior(&data, prior, cfg)?;
    today
        .map(|i| {
            let r = &q.records[i];
            Ok(AttemptPrediction {
                day: d,
                case_id: r.case_id.clone(),
                attempt: r.attempt,
                prob: posterior_mean_prediction(&draws, q.data.row(i))?,
            })
        })
        .collect()
}

/// Mean difference and its standard error (sample sd over `sqrt(n)`,
/// absent for a single difference).
pub fn daily_bias(diffs: &[f64]) -> Result<(f64, Option<f64>)> {
    let n = diffs.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok((mean, None));
    }
    let ss: f64 = diffs.iter().map(|d| (d - mean).powi(2)).sum();
    let sd = (ss / (n - 1) as f64).sqrt();
    Ok((mean, Some(sd / (n as f64).sqrt())))
}

pub fn rmse(bias: f64, se: f64) -> f64 {
    bias.hypot(se)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyEvalRow {
    pub day: u32,
    pub n: usize,
    pub bias: f64,
    pub se: Option<f64>,
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    /// MCMC settings; `seed` is the master seed from which per-day seeds derive.
    pub mcmc: McmcConfig,
    pub start_day: u32,
    /// Last evaluated day; the quarter length when `None`.
    pub end_day: Option<u32>,
    pub exclude_current_day: bool,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mcmc: McmcConfig::default(),
            start_day: DEFAULT_START_DAY,
            end_day: None,
            exclude_current_day: false,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuarterEval {
    pub quarter: i64,
    pub master_seed: u64,
    pub rows: Vec<DailyEvalRow>,
    pub skipped: Vec<u32>,
    pub predictions: Vec<AttemptPrediction>,
    pub benchmark: Benchmark,
}

impl QuarterEval {
    /// `prediction - benchmark` for every evaluated attempt.
    pub fn diffs(&self) -> Vec<f64> {
        self.predictions
            .iter()
            .map(|p| p.prob - self.benchmark.probs[&p.case_id])
            .collect()
    }
}

pub fn day_seed(master: u64, quarter: i64, day: u32) -> u64 {
    derive_seed(master, &[stream::DAILY_MCMC, quarter as u64, u64::from(day)])
}

enum DayOutcome {
    Evaluated(DailyEvalRow, Vec<AttemptPrediction>),
    Skipped(u32),
}

/// Evaluate every day in `[start_day, end_day]` of the quarter.
///
/// Each day's sampler is seeded from `(master seed, quarter, day)`, so the
/// output does not depend on `jobs`.
pub fn run_quarter(q: &QuarterData, prior: &PriorSpec, run: &RunConfig) -> Result<QuarterEval> {
    let end_day = run.end_day.unwrap_or(q.quarter_length);
    if run.start_day < 1 || end_day > q.quarter_length || run.start_day > end_day {
        return Err(Error::InvalidConfig(format!(
            "day range {}..={end_day} outside quarter of {} days",
            run.start_day, q.quarter_length
        )));
    }
    run.mcmc.validate()?;
    let benchmark = benchmark_predictions(q)?;
    let master = run.mcmc.seed;

    let evaluate = |d: u32| -> Result<DayOutcome> {
        if q.day_rows(d).is_empty() {
            return Ok(DayOutcome::Skipped(d));
        }
        let cfg = run.mcmc.with_seed(day_seed(master, q.quarter_id, d));
        let preds = daily_predictions(q, prior, d, &cfg, run.exclude_current_day)?;
        let diffs: Vec<f64> = preds
            .iter()
            .map(|p| p.prob - benchmark.probs[&p.case_id])
            .collect();
        let (bias, se) = daily_bias(&diffs)?;
        let row = DailyEvalRow {
            day: d,
            n: diffs.len(),
            bias,
            se,
            rmse: se.map(|s| rmse(bias, s)),
        };
        log::debug!("quarter {} day {d}: n = {}, bias = {bias:.5}", q.quarter_id, row.n);
        Ok(DayOutcome::Evaluated(row, preds))
    };

    let days: Vec<u32> = (run.start_day..=end_day).collect();
    let outcomes: Vec<Result<DayOutcome>> = if run.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(run.jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| days.par_iter().map(|&d| evaluate(d)).collect())
    } else {
        days.iter().map(|&d| evaluate(d)).collect()
    };

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut predictions = Vec::new();
    for outcome in outcomes {
        match outcome? {
            DayOutcome::Evaluated(row, preds) => {
                rows.push(row);
                predictions.extend(preds);
            }
            DayOutcome::Skipped(d) => skipped.push(d),
        }
    }
    Ok(QuarterEval {
        quarter: q.quarter_id,
        master_seed: master,
        rows,
        skipped,
        predictions,
        benchmark,
    })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub window: String,
    pub n_days: usize,
    pub mean_bias: Option<f64>,
    pub median_bias: Option<f64>,
    pub iqr_bias: Option<f64>,
    pub mean_abs_bias: Option<f64>,
    pub mean_rmse: Option<f64>,
    pub median_rmse: Option<f64>,
    pub iqr_rmse: Option<f64>,
}

struct Spread {
    mean: f64,
    median: f64,
    iqr: f64,
}

fn spread(values: &mut [f64]) -> Option<Spread> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(Spread {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: quantile_sorted(values, 0.5),
        iqr: quantile_sorted(values, 0.75) - quantile_sorted(values, 0.25),
    })
}

/// Bias and RMSE summaries over inclusive day windows. Days without a row
/// (or without an RMSE) are left out of that statistic.
pub fn window_summary(rows: &[DailyEvalRow], windows: &[(u32, u32)]) -> Result<Vec<WindowSummary>> {
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(windows
        .iter()
        .map(|&(lo, hi)| {
            let inside: Vec<&DailyEvalRow> =
                rows.iter().filter(|r| r.day >= lo && r.day <= hi).collect();
            let mut bias: Vec<f64> = inside.iter().map(|r| r.bias).collect();
            let mean_abs_bias = (!bias.is_empty())
                .then(|| bias.iter().map(|b| b.abs()).sum::<f64>() / bias.len() as f64);
            let mut rmse: Vec<f64> = inside.iter().filter_map(|r| r.rmse).collect();
            let b = spread(&mut bias);
            let r = spread(&mut rmse);
            WindowSummary {
                window: format!("{lo}-{hi}"),
                n_days: inside.len(),
                mean_bias: b.as_ref().map(|s| s.mean),
                median_bias: b.as_ref().map(|s| s.median),
                iqr_bias: b.as_ref().map(|s| s.iqr),
                mean_abs_bias,
                mean_rmse: r.as_ref().map(|s| s.mean),
                median_rmse: r.as_ref().map(|s| s.median),
                iqr_rmse: r.as_ref().map(|s| s.iqr),
            }
        })
        .collect())
}

/// Parse `7-30,31-60,61-84`; windows must be ordered, disjoint and inside
/// `[1, quarter_length]`.
pub fn parse_windows(spec: &str, quarter_length: u32) -> Result<Vec<(u32, u32)>> {
    let mut out: Vec<(u32, u32)> = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (a, b) = part
            .split_once('-')
            .ok_or_else(|| Error::InvalidConfig(format!("window `{part}` is not `lo-hi`")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::InvalidConfig(format!("window `{part}`: bad day `{s}`")))
        };
        let (lo, hi) = (parse(a)?, parse(b)?);
        if lo < 1 || lo > hi || hi > quarter_length {
            return Err(Error::InvalidConfig(format!(
                "window `{part}` outside 1..={quarter_length}"
            )));
        }
        if out.last().is_some_and(|&(_, prev_hi)| lo <= prev_hi) {
            return Err(Error::InvalidConfig(format!(
                "window `{part}` overlaps or precedes the previous one"
            )));
        }
        out.push((lo, hi));
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig("no windows given".into()));
    }
    Ok(out)
}

/// Identifies the run an eval file belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub format_version: u32,
    pub schema_hash: String,
    pub seed: u64,
    pub method: String,
    pub quarter: i64,
}

impl EvalMeta {
    fn header_line(&self) -> String {
        format!(
            "# format_version={} schema_hash={} seed={} method={} quarter={}",
            self.format_version, self.schema_hash, self.seed, self.method, self.quarter
        )
    }

    fn parse_header(line: &str) -> Result<Self> {
        let body = line
            .strip_prefix('#')
            .ok_or_else(|| Error::parse(1, 1, "missing `#` metadata line"))?;
        let mut fields = BTreeMap::new();
        for kv in body.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::parse(1, 1, format!("bad metadata field `{kv}`")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::parse(1, 1, format!("metadata lacks `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::parse(1, 1, format!("metadata `{k}` is not an integer")))
        };
        Ok(EvalMeta {
            format_version: num("format_version")? as u32,
            schema_hash: get("schema_hash")?.to_string(),
            seed: num("seed")?,
            method: get("method")?.to_string(),
            quarter: get("quarter")?
                .parse()
                .map_err(|_| Error::parse(1, 1, "metadata `quarter` is not an integer"))?,
        })
    }
}

pub const EVAL_HEADER: [&str; 6] = ["day", "n", "bias", "se", "rmse", "skipped"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Eval CSV: a `#` metadata line, then `day,n,bias,se,rmse,skipped` with one
/// line per day of the evaluated range (skipped days have `n = 0`).
pub fn write_eval_csv<W: Write>(
    writer: W,
    meta: &EvalMeta,
    rows: &[DailyEvalRow],
    skipped: &[u32],
) -> Result<()> {
    let mut writer = writer;
    writeln!(writer, "{}", meta.header_line()).map_err(|e| Error::io("eval.csv", e))?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EVAL_HEADER)?;
    let mut lines: Vec<(u32, Vec<String>)> = rows
        .iter()
        .map(|r| {
            (
                r.day,
                vec![
                    r.day.to_string(),
                    r.n.to_string(),
                    r.bias.to_string(),
                    fmt_opt(r.se),
                    fmt_opt(r.rmse),
                    "0".into(),
                ],
            )
        })
        .collect();
    lines.extend(skipped.iter().map(|&d| {
        (
            d,
            vec![d.to_string(), "0".into(), String::new(), String::new(), String::new(), "1".into()],
        )
    }));
    lines.sort_by_key(|(d, _)| *d);
    for (_, line) in lines {
        w.write_record(line)?;
    }
    w.flush().map_err(|e| Error::io("eval.csv", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalFile {
    pub meta: EvalMeta,
    pub rows: Vec<DailyEvalRow>,
    pub skipped: Vec<u32>,
}

pub fn read_eval_csv<R: BufRead>(mut reader: R) -> Result<EvalFile> {
    let mut first = String::new();
    reader
        .read_line(&mut first)
        .map_err(|e| Error::io("eval.csv", e))?;
    let meta = EvalMeta::parse_header(first.trim_end())?;
    let mut r = csv::ReaderBuilder::new().from_reader(reader);
    let header = r.headers()?.clone();
    if header.iter().ne(EVAL_HEADER) {
        return Err(Error::parse(2, 1, "eval header must be `day,n,bias,se,rmse,skipped`"));
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 3;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let num = |c: usize| -> Result<f64> {
            field(c)
                .parse::<f64>()
                .map_err(|_| Error::parse(line, c + 1, format!("bad number `{}`", field(c))))
        };
        let opt = |c: usize| -> Result<Option<f64>> {
            if field(c).is_empty() {
                Ok(None)
            } else {
                num(c).map(Some)
            }
        };
        let day: u32 = field(0)
            .parse()
            .map_err(|_| Error::parse(line, 1, "bad day"))?;
        match field(5) {
            "1" => skipped.push(day),
            "0" => rows.push(DailyEvalRow {
                day,
                n: field(1)
                    .parse()
                    .map_err(|_| Error::parse(line, 2, "bad count"))?,
                bias: num(2)?,
                se: opt(3)?,
                rmse: opt(4)?,
            }),
            other => return Err(Error::parse(line, 6, format!("bad skipped flag `{other}`"))),
        }
    }
    Ok(EvalFile { meta, rows, skipped })
}

/// Long-format plot rows: `method,quarter,day,bias,se,rmse`.
pub fn write_plot_csv<W: Write>(writer: W, files: &[EvalFile]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "quarter", "day", "bias", "se", "rmse"])?;
    for f in files {
        for r in &f.rows {
            w.write_record([
                f.meta.method.clone(),
                f.meta.quarter.to_string(),
                r.day.to_string(),
                r.bias.to_string(),
                fmt_opt(r.se),
                fmt_opt(r.rmse),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("plot.csv", e))?;
    Ok(())
}
