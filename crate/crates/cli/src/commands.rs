use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context};
use log::info;
use rsd_core::io::{
    check_fingerprint, create, open, read_call_records_file, read_json, read_lit_crosswalk,
    read_schema, write_call_records, write_json, write_schema, RunMeta,
};
use rsd_core::mcmc::McmcConfig;
use rsd_core::mle::{fit_mle, fit_stats, CoefEstimate, FitStats, MleOptions};
use rsd_core::model::CovariateSchema;
use rsd_core::priors::{
    last_prior, lastz_prior, lit_prior, pwp_prior, standard_prior, LitFallback, PriorMethod,
    PriorSpec,
};
use rsd_core::rsd::{run_quarter as run_days, split_quarters, write_eval_csv, EvalMeta, QuarterData, QuarterEval, RunConfig};
use rsd_core::sim::{simulate_quarters, SimConfig, Simulation};
use serde::Serialize;

use crate::report;
use crate::{
    DataArgs, FitArgs, McmcArgs, PriorCommand, Profile, ReportArgs, RunQuarterArgs,
    SimulateArgs, SummarizeArgs,
};

pub fn simulate(a: &SimulateArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(path) => read_json::<SimConfig>(path)?,
        None => SimConfig::desk(9, 0),
    };
    if let Some(q) = a.quarters {
        cfg.n_quarters = q;
    }
    if let Some(c) = a.cases {
        cfg.cases_per_quarter = c;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.target_rr {
        cfg.target_rr = Some(t);
    }
    if a.no_calibration {
        cfg.target_rr = None;
    }
    if let Some(d) = a.drift {
        cfg.drift = d;
    }
    let sim = simulate_quarters(&cfg)?;
    write_simulation(&sim, &cfg, &a.out)?;
    info!(
        "simulated {} quarters, {} attempts, response rate {:.4}",
        cfg.n_quarters,
        sim.records.len(),
        sim.truth.response_rate
    );
    Ok(())
}

pub fn write_simulation(sim: &Simulation, cfg: &SimConfig, dir: &Path) -> anyhow::Result<()> {
    let mut w = create(dir.join("calls.csv"))?;
    write_call_records(&mut w, &sim.schema, &sim.records, Some(&sim.run_meta()))?;
    w.flush()?;
    write_schema(dir.join("schema.json"), &sim.schema)?;
    write_json(dir.join("truth.json"), &sim.truth)?;
    write_json(dir.join("sim_config.json"), cfg)?;
    let mut w = create(dir.join("truth_propensity.csv"))?;
    sim.write_propensity_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

pub struct LoadedData {
    pub schema: Arc<CovariateSchema>,
    pub quarters: Vec<QuarterData>,
    pub meta: Option<RunMeta>,
}

pub fn load_data(
    data: &Path,
    schema: &Path,
    ignore_extra: bool,
    quarter_length: u32,
) -> anyhow::Result<LoadedData> {
    let schema = Arc::new(read_schema(schema)?);
    let calls = read_call_records_file(data, &schema, ignore_extra)?;
    let quarters = split_quarters(calls.records, Arc::clone(&schema), quarter_length)
        .with_context(|| format!("grouping {} into quarters", data.display()))?;
    if quarters.is_empty() {
        bail!(rsd_core::Error::EmptyInput);
    }
    Ok(LoadedData {
        schema,
        quarters,
        meta: calls.meta,
    })
}

fn load(d: &DataArgs) -> anyhow::Result<LoadedData> {
    load_data(&d.data, &d.schema, d.ignore_extra, d.quarter_length)
}

#[derive(Serialize)]
pub struct QuarterStats {
    pub quarter: i64,
    pub n_rows: usize,
    pub converged: bool,
    pub loglik: f64,
    #[serde(flatten)]
    pub stats: FitStats,
}

#[derive(Serialize)]
pub struct StatsFile {
    pub format_version: u32,
    pub schema_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub quarters: Vec<QuarterStats>,
}

pub fn fit_quarter(q: &QuarterData, seed: Option<u64>) -> anyhow::Result<CoefEstimate> {
    let mut fit = fit_mle(q.dataset(), &MleOptions::default())
        .with_context(|| format!("fitting quarter {}", q.quarter_id()))?;
    fit.quarter = Some(q.quarter_id());
    fit.seed = seed;
    if !fit.converged {
        log::warn!("quarter {}: penalized fit (separation or aliasing)", q.quarter_id());
    }
    Ok(fit)
}

pub fn fit_file_name(quarter: i64) -> String {
    format!("fit_q{quarter}.json")
}

pub fn fit(a: &FitArgs) -> anyhow::Result<()> {
    let data = load(&a.data)?;
    let seed = a.seed.or(data.meta.as_ref().and_then(|m| m.seed));
    let selected: Vec<&QuarterData> = if a.quarters.is_empty() {
        data.quarters.iter().collect()
    } else {
        a.quarters
            .iter()
            .map(|id| {
                data.quarters
                    .iter()
                    .find(|q| q.quarter_id() == *id)
                    .with_context(|| format!("quarter {id} not in {}", a.data.data.display()))
            })
            .collect::<anyhow::Result<_>>()?
    };
    if a.out.is_some() && selected.len() != 1 {
        bail!(rsd_core::Error::InvalidConfig(format!(
            "--out needs exactly one quarter, data hold {}; use --quarter or --out-dir",
            selected.len()
        )));
    }
    let mut stats = Vec::new();
    for q in selected {
        let est = fit_quarter(q, seed)?;
        let path = match (&a.out, &a.out_dir) {
            (Some(out), _) => out.clone(),
            (None, Some(dir)) => dir.join(fit_file_name(q.quarter_id())),
            (None, None) => unreachable!("clap requires one output"),
        };
        write_json(&path, &est)?;
        if a.stats_out.is_some() {
            stats.push(QuarterStats {
                quarter: q.quarter_id(),
                n_rows: est.n_rows,
                converged: est.converged,
                loglik: est.loglik,
                stats: fit_stats(&est, q.dataset(), a.hl_groups)?,
            });
        }
        info!("quarter {}: {} rows, converged {}", q.quarter_id(), est.n_rows, est.converged);
    }
    if let Some(path) = &a.stats_out {
        write_json(
            path,
            &StatsFile {
                format_version: rsd_core::FORMAT_VERSION,
                schema_hash: data.schema.fingerprint(),
                seed,
                quarters: stats,
            },
        )?;
    }
    Ok(())
}

fn shared_seed(fits: &[CoefEstimate]) -> Option<u64> {
    let first = fits.first()?.seed?;
    fits.iter().all(|f| f.seed == Some(first)).then_some(first)
}

pub fn read_fit(path: &Path) -> anyhow::Result<CoefEstimate> {
    let fit: CoefEstimate = read_json(path)?;
    fit.validate().with_context(|| format!("checking {}", path.display()))?;
    Ok(fit)
}

pub fn build_prior(cmd: &PriorCommand) -> anyhow::Result<PriorSpec> {
    let prior = match cmd {
        PriorCommand::Standard {
            schema,
            dim,
            variance,
            out,
        } => {
            let (dim, hash) = match (schema, dim) {
                (Some(path), _) => {
                    let s = read_schema(path)?;
                    (s.coefficient_count(), Some(s.fingerprint()))
                }
                (None, Some(d)) => (*d, None),
                (None, None) => unreachable!("clap requires one of --schema, --dim"),
            };
            let mut p = standard_prior(dim, *variance)?;
            p.schema_hash = hash;
            p.seed = out.seed;
            p
        }
        PriorCommand::Pwp {
            fits,
            lambda,
            weights,
            out,
        } => {
            let fits = fits.iter().map(|p| read_fit(p)).collect::<anyhow::Result<Vec<_>>>()?;
            let mut p = pwp_prior(&fits, *lambda, weights.as_deref())?;
            p.seed = out.seed.or_else(|| shared_seed(&fits));
            p
        }
        PriorCommand::Last { fit, out } | PriorCommand::Lastz { fit, out } => {
            let est = read_fit(fit)?;
            let mut p = if matches!(cmd, PriorCommand::Last { .. }) {
                last_prior(&est)?
            } else {
                lastz_prior(&est)?
            };
            p.seed = out.seed.or(est.seed);
            p
        }
        PriorCommand::Lit {
            crosswalk,
            schema,
            fallback_mean,
            fallback_variance,
            out,
        } => {
            let schema = read_schema(schema)?;
            let entries = read_lit_crosswalk(open(crosswalk)?)
                .with_context(|| format!("reading {}", crosswalk.display()))?;
            let fallback = LitFallback {
                mean: *fallback_mean,
                variance: *fallback_variance,
            };
            let mut p = lit_prior(&entries, &schema, fallback)?;
            p.seed = out.seed;
            p
        }
    };
    Ok(prior)
}

fn prior_out(cmd: &PriorCommand) -> &crate::PriorOut {
    match cmd {
        PriorCommand::Standard { out, .. }
        | PriorCommand::Pwp { out, .. }
        | PriorCommand::Last { out, .. }
        | PriorCommand::Lastz { out, .. }
        | PriorCommand::Lit { out, .. } => out,
    }
}

pub fn prior(cmd: &PriorCommand) -> anyhow::Result<()> {
    let prior = build_prior(cmd)?;
    write_json(&prior_out(cmd).out, &prior)?;
    info!("{} prior over {} coefficients", prior.method, prior.dim());
    Ok(())
}

pub fn mcmc_config(a: &McmcArgs, seed: u64) -> McmcConfig {
    let base = match a.profile {
        Profile::Full => McmcConfig::default(),
        Profile::Desk => McmcConfig::desk(),
    };
    McmcConfig {
        tune_loops: a.tune,
        tune_len: a.tune_len,
        burn_in: a.burn_in,
        draws: a.draws.unwrap_or(base.draws),
        target_accept: a.target_accept,
        seed,
        ..base
    }
}

/// Checks that a prior fits the schema it is about to be used with.
pub fn check_prior(prior: &PriorSpec, schema: &CovariateSchema) -> anyhow::Result<()> {
    if let Some(hash) = &prior.schema_hash {
        check_fingerprint(&schema.fingerprint(), hash)?;
    }
    if prior.dim() != schema.coefficient_count() {
        bail!(rsd_core::Error::DimensionMismatch {
            expected: schema.coefficient_count(),
            found: prior.dim(),
        });
    }
    Ok(())
}

pub struct EvalOutputs<'a> {
    pub eval: &'a Path,
    pub predictions: Option<&'a Path>,
    pub benchmark: Option<&'a Path>,
}

/// Runs the daily loop for one quarter and writes its outputs.
pub fn evaluate_quarter(
    q: &QuarterData,
    prior: &PriorSpec,
    run: &RunConfig,
    out: &EvalOutputs<'_>,
) -> anyhow::Result<QuarterEval> {
    check_prior(prior, q.schema())?;
    let eval = run_days(q, prior, run)
        .with_context(|| format!("{} prior on quarter {}", prior.method, q.quarter_id()))?;
    let schema_hash = q.schema().fingerprint();
    let meta = EvalMeta {
        format_version: rsd_core::FORMAT_VERSION,
        schema_hash: schema_hash.clone(),
        seed: run.mcmc.seed,
        method: prior.method.as_str().to_string(),
        quarter: q.quarter_id(),
    };
    let mut w = create(out.eval)?;
    write_eval_csv(&mut w, &meta, &eval.rows, &eval.skipped)?;
    w.flush()?;

    if let Some(path) = out.predictions {
        let mut w = create(path)?;
        writeln!(w, "{}", RunMeta::new(schema_hash.clone(), Some(run.mcmc.seed)).header_line())?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["day", "case_id", "attempt", "prob", "benchmark", "diff"])?;
        for p in &eval.predictions {
            let bench = eval.benchmark.probs[&p.case_id];
            csv.write_record([
                p.day.to_string(),
                p.case_id.clone(),
                p.attempt.to_string(),
                p.prob.to_string(),
                bench.to_string(),
                (p.prob - bench).to_string(),
            ])?;
        }
        csv.flush()?;
    }
    if let Some(path) = out.benchmark {
        let mut fit = eval.benchmark.fit.clone();
        fit.quarter = Some(q.quarter_id());
        fit.seed = Some(run.mcmc.seed);
        write_json(path, &fit)?;
    }
    Ok(eval)
}

pub fn run_quarter(a: &RunQuarterArgs) -> anyhow::Result<()> {
    let data = load(&a.data)?;
    let q = match a.quarter {
        Some(id) => data
            .quarters
            .iter()
            .find(|q| q.quarter_id() == id)
            .with_context(|| format!("quarter {id} not in {}", a.data.data.display()))?,
        None if data.quarters.len() == 1 => &data.quarters[0],
        None => bail!(rsd_core::Error::InvalidConfig(format!(
            "data hold {} quarters; pick one with --quarter",
            data.quarters.len()
        ))),
    };
    let prior: PriorSpec = read_json(&a.prior)?;
    let seed = a
        .mcmc
        .seed
        .or(data.meta.as_ref().and_then(|m| m.seed))
        .unwrap_or(0);
    let run = RunConfig {
        mcmc: mcmc_config(&a.mcmc, seed),
        start_day: a.start_day,
        end_day: a.end_day,
        exclude_current_day: a.exclude_current_day,
        jobs: a.jobs.max(1),
    };
    let eval = evaluate_quarter(
        q,
        &prior,
        &run,
        &EvalOutputs {
            eval: &a.out,
            predictions: a.predictions_out.as_deref(),
            benchmark: a.benchmark_out.as_deref(),
        },
    )?;
    info!(
        "quarter {}: {} days evaluated, {} skipped",
        q.quarter_id(),
        eval.rows.len(),
        eval.skipped.len()
    );
    Ok(())
}

pub fn summarize(a: &SummarizeArgs) -> anyhow::Result<()> {
    let files = report::load_evals(&a.evals)?;
    let summary = report::summarize(&a.evals, &files, &a.windows.windows, a.windows.quarter_length)?;
    write_json(&a.out, &summary)?;
    Ok(())
}

pub fn report(a: &ReportArgs) -> anyhow::Result<()> {
    let files = report::load_evals(&a.evals)?;
    let summary = report::summarize(&a.evals, &files, &a.windows.windows, a.windows.quarter_length)?;
    report::write_report(&files, &summary, &a.plot_out, &a.windows_out)
}

pub fn method_needs_history(method: PriorMethod) -> bool {
    matches!(method, PriorMethod::Pwp | PriorMethod::Last | PriorMethod::Lastz)
}
