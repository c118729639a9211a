use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn rsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsd"))
        .args(args)
        .env("RSD_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = rsd(args);
    assert!(
        out.status.success(),
        "rsd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, quarters: usize, cases: usize, seed: u64) -> PathBuf {
    let out = dir.join("sim");
    ok(&[
        "simulate",
        "--quarters",
        &quarters.to_string(),
        "--cases",
        &cases.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&out),
    ]);
    out
}

fn quick_run(sim: &Path, prior: &Path, out: &Path, jobs: &str) -> Vec<u8> {
    ok(&[
        "run-quarter",
        "--data",
        s(&sim.join("calls.csv")),
        "--schema",
        s(&sim.join("schema.json")),
        "--quarter",
        "2",
        "--prior",
        s(prior),
        "--seed",
        "7",
        "--tune",
        "10",
        "--burn-in",
        "100",
        "--draws",
        "200",
        "--end-day",
        "24",
        "--jobs",
        jobs,
        "--out",
        s(out),
    ]);
    fs::read(out).unwrap()
}

fn standard_prior(sim: &Path, out: &Path) {
    ok(&["prior", "standard", "--schema", s(&sim.join("schema.json")), "--out", s(out)]);
}

#[test]
fn run_quarter_with_fixed_seed_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), 2, 150, 5);
    let prior = dir.path().join("standard.json");
    standard_prior(&sim, &prior);
    let a = quick_run(&sim, &prior, &dir.path().join("a.csv"), "1");
    let b = quick_run(&sim, &prior, &dir.path().join("b.csv"), "1");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("# format_version=1"), "{text}");
}

#[test]
fn job_count_does_not_change_the_output() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), 2, 150, 6);
    let prior = dir.path().join("standard.json");
    standard_prior(&sim, &prior);
    let one = quick_run(&sim, &prior, &dir.path().join("one.csv"), "1");
    let three = quick_run(&sim, &prior, &dir.path().join("three.csv"), "3");
    assert_eq!(one, three);
}

#[test]
fn pwp_prior_over_eight_quarters_records_its_sources() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), 8, 150, 8);
    let fits = dir.path().join("fits");
    ok(&[
        "fit",
        "--data",
        s(&sim.join("calls.csv")),
        "--schema",
        s(&sim.join("schema.json")),
        "--out-dir",
        s(&fits),
    ]);
    let prior = dir.path().join("pwp.json");
    let mut args = vec!["prior".to_string(), "pwp".into()];
    for q in 1..=8 {
        args.push(fits.join(format!("fit_q{q}.json")).display().to_string());
    }
    args.extend(["--out".into(), prior.display().to_string()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    let json: serde_json::Value = serde_json::from_slice(&fs::read(&prior).unwrap()).unwrap();
    assert_eq!(json["method"], "pwp");
    assert_eq!(json["seed"], 8);
    assert_eq!(json["provenance"]["sources"].as_array().unwrap().len(), 8);
    let lambda = json["provenance"]["lambda"].as_f64().unwrap();
    assert!(lambda >= 0.003, "{lambda}");
    assert_eq!(json["mean"].as_array().unwrap().len(), 12);
}

#[test]
fn example_pipeline_produces_consistent_windows() {
    let dir = TempDir::new().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/experiment.json");
    let out = dir.path().join("out");
    ok(&["pipeline", "--config", s(&config), "--out", s(&out)]);

    let run: serde_json::Value = serde_json::from_slice(&fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["evals"].as_array().unwrap().len(), 5);
    assert!(run["failures"].as_array().unwrap().is_empty());

    let text = fs::read_to_string(out.join("windows.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# format_version=1"));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (bias, rmse, n_days) = (col("mean_bias"), col("mean_rmse"), col("n_days"));
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let b: f64 = f[bias].parse().unwrap();
        let r: f64 = f[rmse].parse().unwrap();
        assert!(r >= b.abs(), "{line}");
        assert!(f[n_days].parse::<usize>().unwrap() > 0);
        rows += 1;
    }
    assert_eq!(rows, 15);
    assert!(out.join("plot.csv").exists());
    assert!(out.join("summary.json").exists());
}

fn error_line(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().unwrap_or_default().to_string();
    assert!(line.starts_with("rsd: error kind="), "{err}");
    line
}

#[test]
fn missing_input_is_reported_as_file_not_found() {
    let dir = TempDir::new().unwrap();
    let out = rsd(&[
        "fit",
        "--data",
        s(&dir.path().join("nope.csv")),
        "--schema",
        s(&dir.path().join("nope.json")),
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(error_line(&out).contains("kind=file_not_found"));
}

#[test]
fn bad_number_is_reported_with_its_position() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), 1, 200, 2);
    let calls = sim.join("calls.csv");
    let text = fs::read_to_string(&calls).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // Line 4 of the file: meta, header, two good rows, then this one.
    let mut fields: Vec<String> = lines[3].split(',').map(String::from).collect();
    fields[5] = "abc".into();
    lines[3] = fields.join(",");
    fs::write(&calls, lines.join("\n") + "\n").unwrap();
    let out = rsd(&[
        "fit",
        "--data",
        s(&calls),
        "--schema",
        s(&sim.join("schema.json")),
        "--out-dir",
        s(dir.path()),
    ]);
    let line = error_line(&out);
    assert!(line.contains("kind=parse_error line=4 column=6"), "{line}");
}

#[test]
fn data_from_another_schema_is_rejected() {
    let dir = TempDir::new().unwrap();
    let a = simulate(&dir.path().join("a"), 1, 200, 2);
    let b = dir.path().join("b.json");
    let mut schema: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("schema.json")).unwrap()).unwrap();
    schema.as_array_mut().unwrap().pop();
    fs::write(&b, serde_json::to_vec(&schema).unwrap()).unwrap();
    let out = rsd(&[
        "fit",
        "--data",
        s(&a.join("calls.csv")),
        "--schema",
        s(&b),
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(error_line(&out).contains("kind=schema_fingerprint_mismatch"));
}

#[test]
fn prior_of_the_wrong_dimension_is_rejected() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), 2, 60, 3);
    let prior = dir.path().join("small.json");
    ok(&["prior", "standard", "--dim", "3", "--out", s(&prior)]);
    let out = rsd(&[
        "run-quarter",
        "--data",
        s(&sim.join("calls.csv")),
        "--schema",
        s(&sim.join("schema.json")),
        "--quarter",
        "2",
        "--prior",
        s(&prior),
        "--out",
        s(&dir.path().join("e.csv")),
    ]);
    assert!(error_line(&out).contains("kind=dimension_mismatch"));
}
