//! End-to-end experiment driven by one JSON file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::{info, warn};
use rsd_core::io::{open, read_json, read_lit_crosswalk, write_json};
use rsd_core::mcmc::McmcConfig;
use rsd_core::mle::{fit_stats, CoefEstimate};
use rsd_core::priors::{
    last_prior, lastz_prior, lit_prior, pwp_prior, standard_prior, LitFallback, PriorMethod,
    PriorSpec, DEFAULT_RIDGE_LAMBDA, STANDARD_VARIANCE,
};
use rsd_core::rsd::{parse_windows, RunConfig, DEFAULT_QUARTER_LENGTH, DEFAULT_START_DAY};
use rsd_core::sim::{simulate_quarters, SimConfig};
use rsd_core::Error;
use serde::{Deserialize, Serialize};

use crate::commands::{
    evaluate_quarter, fit_file_name, method_needs_history, fit_quarter, load_data, write_simulation, EvalOutputs,
    QuarterStats, StatsFile,
};
use crate::report;
use crate::PipelineArgs;

/// Simulated input: the desk preset (or a full simulator file) with a few
/// overrides. The master seed of the experiment seeds the simulation.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub config: Option<PathBuf>,
    pub n_quarters: Option<usize>,
    pub cases_per_quarter: Option<usize>,
    pub target_rr: Option<f64>,
    pub drift: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub calls: PathBuf,
    pub schema: PathBuf,
    #[serde(default)]
    pub ignore_extra: bool,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcSection {
    pub tune_loops: usize,
    pub tune_len: usize,
    pub burn_in: usize,
    pub draws: usize,
    pub target_accept: f64,
}

impl Default for McmcSection {
    fn default() -> Self {
        let d = McmcConfig::default();
        McmcSection {
            tune_loops: d.tune_loops,
            tune_len: d.tune_len,
            burn_in: d.burn_in,
            draws: d.draws,
            target_accept: d.target_accept,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_quarter_length() -> u32 {
    DEFAULT_QUARTER_LENGTH
}
fn default_history() -> usize {
    8
}
fn default_lambda() -> f64 {
    DEFAULT_RIDGE_LAMBDA
}
fn default_start_day() -> u32 {
    DEFAULT_START_DAY
}
fn default_windows() -> String {
    "7-30,31-60,61-84".into()
}
fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub simulate: Option<SimSection>,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default = "default_quarter_length")]
    pub quarter_length: u32,
    /// Quarters to evaluate; the last quarter when empty.
    #[serde(default)]
    pub target_quarters: Vec<i64>,
    /// How many preceding quarters feed the historical priors.
    #[serde(default = "default_history")]
    pub history: usize,
    pub methods: Vec<PriorMethod>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub lit_crosswalk: Option<PathBuf>,
    #[serde(default)]
    pub mcmc: McmcSection,
    #[serde(default = "default_start_day")]
    pub start_day: u32,
    #[serde(default)]
    pub end_day: Option<u32>,
    #[serde(default)]
    pub exclude_current_day: bool,
    #[serde(default = "default_windows")]
    pub windows: String,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn must_exist(p: &Path) -> anyhow::Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)).into())
    }
}

impl ExperimentConfig {
    /// Reads the file and makes relative paths relative to its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let mut cfg: ExperimentConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.output_dir = resolve(base, &cfg.output_dir);
        if let Some(d) = &mut cfg.data {
            d.calls = resolve(base, &d.calls);
            d.schema = resolve(base, &d.schema);
        }
        if let Some(s) = &mut cfg.simulate {
            s.config = s.config.as_deref().map(|p| resolve(base, p));
        }
        cfg.lit_crosswalk = cfg.lit_crosswalk.as_deref().map(|p| resolve(base, p));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let bad = |m: String| -> anyhow::Result<()> { Err(Error::InvalidConfig(m).into()) };
        match (&self.simulate, &self.data) {
            (Some(_), Some(_)) | (None, None) => {
                return bad("exactly one of `simulate` and `data` is required".into())
            }
            (None, Some(d)) => {
                must_exist(&d.calls)?;
                must_exist(&d.schema)?;
            }
            (Some(s), None) => {
                if let Some(p) = &s.config {
                    must_exist(p)?;
                }
            }
        }
        if self.methods.is_empty() {
            return bad("`methods` is empty".into());
        }
        if self.methods.contains(&PriorMethod::Lit) {
            match &self.lit_crosswalk {
                Some(p) => must_exist(p)?,
                None => return bad("method `lit` needs `lit_crosswalk`".into()),
            }
        }
        if self.history == 0 && self.methods.iter().any(|m| method_needs_history(*m)) {
            return bad("historical priors need `history` >= 1".into());
        }
        parse_windows(&self.windows, self.quarter_length)?;
        Ok(())
    }

    fn run_config(&self, jobs: usize) -> RunConfig {
        RunConfig {
            mcmc: McmcConfig {
                tune_loops: self.mcmc.tune_loops,
                tune_len: self.mcmc.tune_len,
                burn_in: self.mcmc.burn_in,
                draws: self.mcmc.draws,
                target_accept: self.mcmc.target_accept,
                seed: self.seed,
                ..McmcConfig::default()
            },
            start_day: self.start_day,
            end_day: self.end_day,
            exclude_current_day: self.exclude_current_day,
            jobs,
        }
    }
}

#[derive(Serialize)]
struct Failure {
    method: PriorMethod,
    quarter: i64,
    error: String,
}

/// Index of everything a pipeline run wrote.
#[derive(Serialize)]
struct RunIndex {
    format_version: u32,
    schema_hash: String,
    seed: u64,
    fits: Vec<String>,
    priors: Vec<String>,
    evals: Vec<String>,
    failures: Vec<Failure>,
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).display().to_string()
}

pub fn run(a: &PipelineArgs) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let jobs = a.jobs.unwrap_or(cfg.jobs).max(1);

    let (calls, schema_path, ignore_extra) = match (&cfg.simulate, &cfg.data) {
        (Some(s), _) => {
            let mut sim_cfg = match &s.config {
                Some(p) => read_json::<SimConfig>(p)?,
                None => SimConfig::desk(9, cfg.seed),
            };
            sim_cfg.seed = cfg.seed;
            sim_cfg.quarter_length = cfg.quarter_length;
            if let Some(n) = s.n_quarters {
                sim_cfg.n_quarters = n;
            }
            if let Some(c) = s.cases_per_quarter {
                sim_cfg.cases_per_quarter = c;
            }
            if s.target_rr.is_some() {
                sim_cfg.target_rr = s.target_rr;
            }
            if let Some(d) = s.drift {
                sim_cfg.drift = d;
            }
            let sim = simulate_quarters(&sim_cfg)?;
            let dir = out.join("data");
            write_simulation(&sim, &sim_cfg, &dir)?;
            info!("simulated {} attempts into {}", sim.records.len(), dir.display());
            (dir.join("calls.csv"), dir.join("schema.json"), false)
        }
        (None, Some(d)) => (d.calls.clone(), d.schema.clone(), d.ignore_extra),
        (None, None) => unreachable!("validated"),
    };
    let data = load_data(&calls, &schema_path, ignore_extra, cfg.quarter_length)?;
    let schema_hash = data.schema.fingerprint();
    if let Some(seed) = data.meta.as_ref().and_then(|m| m.seed) {
        if seed != cfg.seed {
            warn!("data were generated with seed {seed}, experiment seed is {}", cfg.seed);
        }
    }

    let mut index = RunIndex {
        format_version: rsd_core::FORMAT_VERSION,
        schema_hash: schema_hash.clone(),
        seed: cfg.seed,
        fits: Vec::new(),
        priors: Vec::new(),
        evals: Vec::new(),
        failures: Vec::new(),
    };

    let mut fits: Vec<CoefEstimate> = Vec::new();
    let mut stats = Vec::new();
    for q in &data.quarters {
        let fit = fit_quarter(q, Some(cfg.seed))?;
        let path = out.join("fits").join(fit_file_name(q.quarter_id()));
        write_json(&path, &fit)?;
        index.fits.push(rel(&out, &path));
        stats.push(QuarterStats {
            quarter: q.quarter_id(),
            n_rows: fit.n_rows,
            converged: fit.converged,
            loglik: fit.loglik,
            stats: fit_stats(&fit, q.dataset(), 10)?,
        });
        fits.push(fit);
    }
    write_json(
        out.join("fits").join("stats.json"),
        &StatsFile {
            format_version: rsd_core::FORMAT_VERSION,
            schema_hash: schema_hash.clone(),
            seed: Some(cfg.seed),
            quarters: stats,
        },
    )?;

    let lit_entries = match &cfg.lit_crosswalk {
        Some(p) if cfg.methods.contains(&PriorMethod::Lit) => Some(
            read_lit_crosswalk(open(p)?).with_context(|| format!("reading {}", p.display()))?,
        ),
        _ => None,
    };

    let targets: Vec<i64> = if cfg.target_quarters.is_empty() {
        vec![data.quarters.last().expect("non-empty").quarter_id()]
    } else {
        cfg.target_quarters.clone()
    };
    let run_cfg = cfg.run_config(jobs);
    let mut eval_paths = Vec::new();
    for t in targets {
        let q = data
            .quarters
            .iter()
            .find(|q| q.quarter_id() == t)
            .with_context(|| format!("target quarter {t} not in the data"))?;
        let earlier: Vec<CoefEstimate> =
            fits.iter().filter(|f| f.quarter < Some(t)).cloned().collect();
        let history = &earlier[earlier.len().saturating_sub(cfg.history)..];
        for &method in &cfg.methods {
            let built: rsd_core::Result<PriorSpec> = match method {
                PriorMethod::Standard => standard_prior(data.schema.coefficient_count(), STANDARD_VARIANCE)
                    .map(|mut p| {
                        p.schema_hash = Some(schema_hash.clone());
                        p
                    }),
                _ if method_needs_history(method) && history.is_empty() => Err(Error::InvalidConfig(
                    format!("no quarters before {t} to build a {method} prior from"),
                )),
                PriorMethod::Pwp => pwp_prior(history, cfg.lambda, None),
                PriorMethod::Last => last_prior(history.last().expect("non-empty")),
                PriorMethod::Lastz => lastz_prior(history.last().expect("non-empty")),
                PriorMethod::Lit => lit_prior(
                    lit_entries.as_deref().unwrap_or_default(),
                    &data.schema,
                    LitFallback::default(),
                ),
            };
            let mut prior = match built {
                Ok(p) => p,
                Err(e) => {
                    warn!("quarter {t}: {method} prior unavailable: {e}");
                    index.failures.push(Failure {
                        method,
                        quarter: t,
                        error: e.to_string(),
                    });
                    continue;
                }
            };
            prior.seed = Some(cfg.seed);
            let prior_path = out.join("priors").join(format!("{method}_q{t}.json"));
            write_json(&prior_path, &prior)?;
            index.priors.push(rel(&out, &prior_path));

            let eval_path = out.join("eval").join(format!("{method}_q{t}.csv"));
            evaluate_quarter(
                q,
                &prior,
                &run_cfg,
                &EvalOutputs {
                    eval: &eval_path,
                    predictions: None,
                    benchmark: None,
                },
            )?;
            info!("quarter {t}: {method} done");
            index.evals.push(rel(&out, &eval_path));
            eval_paths.push(eval_path);
        }
    }
    if eval_paths.is_empty() {
        bail!(Error::InvalidConfig("no prior could be built; nothing was evaluated".into()));
    }

    let files = report::load_evals(&eval_paths)?;
    let summary = report::summarize(&eval_paths, &files, &cfg.windows, cfg.quarter_length)?;
    write_json(out.join("summary.json"), &summary)?;
    report::write_report(&files, &summary, &out.join("plot.csv"), &out.join("windows.csv"))?;
    write_json(out.join("run.json"), &index)?;
    Ok(())
}
