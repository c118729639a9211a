use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rsd_core::io::{check_fingerprint, create, open, RunMeta};
use rsd_core::rsd::{parse_windows, read_eval_csv, window_summary, write_plot_csv, EvalFile, WindowSummary};
use serde::Serialize;

#[derive(Serialize)]
pub struct EvalSummary {
    pub method: String,
    pub quarter: i64,
    pub seed: u64,
    pub source: String,
    pub windows: Vec<WindowSummary>,
}

/// Output of `summarize`.
#[derive(Serialize)]
pub struct SummaryFile {
    pub format_version: u32,
    pub schema_hash: String,
    pub seeds: Vec<u64>,
    pub evals: Vec<EvalSummary>,
}

pub fn load_evals(paths: &[PathBuf]) -> anyhow::Result<Vec<EvalFile>> {
    let files = paths
        .iter()
        .map(|p| read_eval_csv(open(p)?).with_context(|| format!("reading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if let Some(first) = files.first() {
        for f in &files[1..] {
            check_fingerprint(&first.meta.schema_hash, &f.meta.schema_hash)?;
        }
    }
    Ok(files)
}

pub fn summarize(
    paths: &[PathBuf],
    files: &[EvalFile],
    windows: &str,
    quarter_length: u32,
) -> anyhow::Result<SummaryFile> {
    let windows = parse_windows(windows, quarter_length)?;
    let mut seeds: Vec<u64> = files.iter().map(|f| f.meta.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let evals = files
        .iter()
        .zip(paths)
        .map(|(f, p)| {
            Ok(EvalSummary {
                method: f.meta.method.clone(),
                quarter: f.meta.quarter,
                seed: f.meta.seed,
                source: p.display().to_string(),
                windows: window_summary(&f.rows, &windows)
                    .with_context(|| format!("summarizing {}", p.display()))?,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(SummaryFile {
        format_version: rsd_core::FORMAT_VERSION,
        schema_hash: files[0].meta.schema_hash.clone(),
        seeds,
        evals,
    })
}

fn meta_line(summary: &SummaryFile) -> String {
    let seed = match summary.seeds.as_slice() {
        [one] => Some(*one),
        _ => None,
    };
    let mut line = RunMeta::new(summary.schema_hash.clone(), seed).header_line();
    if summary.seeds.len() > 1 {
        let list: Vec<String> = summary.seeds.iter().map(u64::to_string).collect();
        line.push_str(&format!(" seeds={}", list.join(",")));
    }
    line
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_report(
    files: &[EvalFile],
    summary: &SummaryFile,
    plot_out: &Path,
    windows_out: &Path,
) -> anyhow::Result<()> {
    let mut w = create(plot_out)?;
    writeln!(w, "{}", meta_line(summary))?;
    write_plot_csv(&mut w, files)?;
    w.flush()?;

    let mut w = create(windows_out)?;
    writeln!(w, "{}", meta_line(summary))?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record([
        "method", "quarter", "seed", "window", "n_days", "mean_bias", "median_bias", "iqr_bias",
        "mean_abs_bias", "mean_rmse", "median_rmse", "iqr_rmse",
    ])?;
    for e in &summary.evals {
        for s in &e.windows {
            csv.write_record([
                e.method.clone(),
                e.quarter.to_string(),
                e.seed.to_string(),
                s.window.clone(),
                s.n_days.to_string(),
                opt(s.mean_bias),
                opt(s.median_bias),
                opt(s.iqr_bias),
                opt(s.mean_abs_bias),
                opt(s.mean_rmse),
                opt(s.median_rmse),
                opt(s.iqr_rmse),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}
