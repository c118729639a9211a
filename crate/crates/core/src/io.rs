//! Flat-file interchange: call-record CSV, schema JSON, literature
//! crosswalk CSV and generic JSON documents.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{CallRecord, CovariateKind, CovariateSchema, CovariateValue, RESERVED_COLUMNS};
use crate::priors::{LitStudyEntry, Scale};
use crate::FORMAT_VERSION;

pub const LIT_HEADER: [&str; 6] = ["study", "year", "predictor", "scale", "estimate", "std_error"];

pub fn open(path: impl AsRef<Path>) -> Result<BufReader<File>> {
    let path = path.as_ref();
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub fn create(path: impl AsRef<Path>) -> Result<BufWriter<File>> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    serde_json::from_reader(open(path)?).map_err(|e| {
        Error::parse(e.line() as u64, e.column(), format!("{}: {e}", path.display()))
    })
}

pub fn read_schema(path: impl AsRef<Path>) -> Result<CovariateSchema> {
    read_json(path)
}

pub fn write_schema(path: impl AsRef<Path>, schema: &CovariateSchema) -> Result<()> {
    write_json(path, schema)
}

/// Fails unless both fingerprints are equal.
pub fn check_fingerprint(expected: &str, found: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::SchemaFingerprintMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}

/// Run identity carried by a leading `# key=value ...` line in CSV outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunMeta {
    pub format_version: u32,
    pub schema_hash: String,
    pub seed: Option<u64>,
}

impl RunMeta {
    pub fn new(schema_hash: impl Into<String>, seed: Option<u64>) -> Self {
        RunMeta {
            format_version: FORMAT_VERSION,
            schema_hash: schema_hash.into(),
            seed,
        }
    }

    pub fn header_line(&self) -> String {
        let mut line = format!(
            "# format_version={} schema_hash={}",
            self.format_version, self.schema_hash
        );
        if let Some(seed) = self.seed {
            line.push_str(&format!(" seed={seed}"));
        }
        line
    }

    pub fn parse(line: &str) -> Result<Self> {
        let body = line
            .trim_end()
            .strip_prefix('#')
            .ok_or_else(|| Error::parse(1, 1, "metadata line must start with `#`"))?;
        let mut fields = BTreeMap::new();
        for kv in body.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::parse(1, 1, format!("bad metadata field `{kv}`")))?;
            fields.insert(k, v);
        }
        let format_version = fields
            .get("format_version")
            .ok_or_else(|| Error::parse(1, 1, "metadata lacks `format_version`"))?
            .parse()
            .map_err(|_| Error::parse(1, 1, "bad `format_version`"))?;
        if format_version != FORMAT_VERSION {
            return Err(Error::parse(
                1,
                1,
                format!("unsupported format_version {format_version}"),
            ));
        }
        let schema_hash = fields
            .get("schema_hash")
            .ok_or_else(|| Error::parse(1, 1, "metadata lacks `schema_hash`"))?
            .to_string();
        let seed = fields
            .get("seed")
            .map(|s| s.parse().map_err(|_| Error::parse(1, 1, "bad `seed`")))
            .transpose()?;
        Ok(RunMeta {
            format_version,
            schema_hash,
            seed,
        })
    }
}

/// Splits off an optional leading metadata line. The returned reader
/// yields the rest of the input unchanged.
fn split_meta<R: Read>(reader: R) -> Result<(Option<RunMeta>, impl Read)> {
    let mut buf = BufReader::new(reader);
    let mut first = String::new();
    buf.read_line(&mut first).map_err(|e| Error::io("input", e))?;
    if first.starts_with('#') {
        Ok((Some(RunMeta::parse(&first)?), Cursor::new(String::new()).chain(buf)))
    } else {
        Ok((None, Cursor::new(first).chain(buf)))
    }
}

fn csv_line(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn csv_error(e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::parse(p.line(), 0, e.to_string()),
        None => Error::Csv(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallRecords {
    pub meta: Option<RunMeta>,
    pub records: Vec<CallRecord>,
}

/// Parses `quarter,case_id,day,attempt,outcome,<schema columns>`, optionally
/// preceded by a metadata line whose schema hash must match `schema`.
///
/// The reserved columns must come first and in that order; schema columns
/// may follow in any order. Columns not in the schema are an error unless
/// `ignore_extra` is set.
pub fn read_call_records<R: Read>(
    reader: R,
    schema: &CovariateSchema,
    ignore_extra: bool,
) -> Result<CallRecords> {
    let (meta, rest) = split_meta(reader)?;
    if let Some(m) = &meta {
        check_fingerprint(&schema.fingerprint(), &m.schema_hash)?;
    }
    let offset = u64::from(meta.is_some());
    let records = parse_call_rows(rest, schema, ignore_extra).map_err(|e| match e {
        Error::Parse { line, column, message } => Error::Parse {
            line: line + offset,
            column,
            message,
        },
        other => other,
    })?;
    Ok(CallRecords { meta, records })
}

fn parse_call_rows<R: Read>(
    reader: R,
    schema: &CovariateSchema,
    ignore_extra: bool,
) -> Result<Vec<CallRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = rdr.records();
    let header = match rows.next() {
        Some(h) => h.map_err(csv_error)?,
        None => return Err(Error::parse(1, 0, "missing header row")),
    };
    for (i, want) in RESERVED_COLUMNS.iter().enumerate() {
        match header.get(i) {
            Some(got) if got == *want => {}
            got => {
                return Err(Error::parse(
                    1,
                    i + 1,
                    format!("expected column `{want}`, found `{}`", got.unwrap_or("")),
                ))
            }
        }
    }
    let mut columns: Vec<Option<usize>> = Vec::with_capacity(header.len());
    for (i, name) in header.iter().enumerate().skip(RESERVED_COLUMNS.len()) {
        match schema.entries().iter().position(|e| e.name == name) {
            Some(k) if columns.contains(&Some(k)) => {
                return Err(Error::parse(1, i + 1, format!("duplicate column `{name}`")))
            }
            Some(k) => columns.push(Some(k)),
            None if ignore_extra => columns.push(None),
            None => return Err(Error::parse(1, i + 1, format!("unknown column `{name}`"))),
        }
    }
    if let Some(missing) = schema
        .entries()
        .iter()
        .enumerate()
        .find(|(k, _)| !columns.contains(&Some(*k)))
    {
        return Err(Error::parse(1, 0, format!("missing column `{}`", missing.1.name)));
    }

    let mut out = Vec::new();
    for row in rows {
        let row = row.map_err(csv_error)?;
        let line = csv_line(&row);
        if row.len() != header.len() {
            return Err(Error::parse(
                line,
                row.len().min(header.len()) + 1,
                format!("expected {} fields, found {}", header.len(), row.len()),
            ));
        }
        let field = |i: usize| row.get(i).unwrap_or("");
        let int = |i: usize| -> Result<i64> {
            field(i)
                .parse::<i64>()
                .map_err(|_| Error::parse(line, i + 1, format!("`{}` is not an integer", field(i))))
        };
        let positive = |i: usize| -> Result<u32> {
            u32::try_from(int(i)?)
                .ok()
                .filter(|&v| v >= 1)
                .ok_or_else(|| Error::parse(line, i + 1, format!("`{}` must be a positive integer", field(i))))
        };
        let outcome = match field(4) {
            "0" | "false" => false,
            "1" | "true" => true,
            other => return Err(Error::parse(line, 5, format!("outcome `{other}` is not 0 or 1"))),
        };
        let mut covariates = BTreeMap::new();
        for (offset, k) in columns.iter().enumerate() {
            let Some(k) = *k else { continue };
            let col = RESERVED_COLUMNS.len() + offset;
            let entry = &schema.entries()[k];
            let raw = field(col);
            let value = match &entry.kind {
                CovariateKind::Numeric => raw
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(CovariateValue::Number)
                    .ok_or_else(|| {
                        Error::parse(line, col + 1, format!("`{raw}` is not a finite number"))
                    })?,
                CovariateKind::Categorical { levels, .. } => {
                    if !levels.iter().any(|l| l == raw) {
                        return Err(Error::parse(
                            line,
                            col + 1,
                            format!("unknown level `{raw}` for `{}`", entry.name),
                        ));
                    }
                    CovariateValue::Level(raw.to_string())
                }
            };
            covariates.insert(entry.name.clone(), value);
        }
        let case_id = field(1);
        if case_id.is_empty() {
            return Err(Error::parse(line, 2, "empty case_id"));
        }
        out.push(CallRecord {
            quarter: int(0)?,
            case_id: case_id.to_string(),
            day: positive(2)?,
            attempt: positive(3)?,
            outcome,
            covariates,
        });
    }
    Ok(out)
}

pub fn read_call_records_file(
    path: impl AsRef<Path>,
    schema: &CovariateSchema,
    ignore_extra: bool,
) -> Result<CallRecords> {
    let path = path.as_ref();
    read_call_records(open(path)?, schema, ignore_extra).map_err(|e| match e {
        Error::Parse { line, column, message } => Error::Parse {
            line,
            column,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn write_call_records<W: Write>(
    mut writer: W,
    schema: &CovariateSchema,
    records: &[CallRecord],
    meta: Option<&RunMeta>,
) -> Result<()> {
    if let Some(m) = meta {
        writeln!(writer, "{}", m.header_line()).map_err(|e| Error::io("call records", e))?;
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = RESERVED_COLUMNS.to_vec();
    header.extend(schema.entries().iter().map(|e| e.name.as_str()));
    w.write_record(&header)?;
    for r in records {
        let mut fields = vec![
            r.quarter.to_string(),
            r.case_id.clone(),
            r.day.to_string(),
            r.attempt.to_string(),
            u8::from(r.outcome).to_string(),
        ];
        for e in schema.entries() {
            let v = r
                .covariates
                .get(&e.name)
                .ok_or_else(|| Error::MissingCovariate(e.name.clone()))?;
            fields.push(v.to_string());
        }
        w.write_record(&fields)?;
    }
    w.flush().map_err(|e| Error::io("call records", e))?;
    Ok(())
}

/// Parses the literature crosswalk `study,year,predictor,scale,estimate,std_error`.
pub fn read_lit_crosswalk<R: Read>(reader: R) -> Result<Vec<LitStudyEntry>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = rdr.records();
    let header = match rows.next() {
        Some(h) => h.map_err(csv_error)?,
        None => return Err(Error::parse(1, 0, "missing header row")),
    };
    if header.iter().ne(LIT_HEADER) {
        return Err(Error::parse(
            1,
            0,
            format!("expected header `{}`", LIT_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for row in rows {
        let row = row.map_err(csv_error)?;
        let line = csv_line(&row);
        if row.len() != LIT_HEADER.len() {
            return Err(Error::parse(line, 0, format!("expected 6 fields, found {}", row.len())));
        }
        let num = |i: usize| -> Result<f64> {
            row[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(line, i + 1, format!("`{}` is not a finite number", &row[i])))
        };
        let scale = match &row[3] {
            "logit" => Scale::Logit,
            "probit" => Scale::Probit,
            other => {
                return Err(Error::parse(line, 4, format!("scale `{other}` is not logit or probit")))
            }
        };
        out.push(LitStudyEntry {
            study: row[0].to_string(),
            year: row[1]
                .parse()
                .map_err(|_| Error::parse(line, 2, format!("`{}` is not a year", &row[1])))?,
            predictor: row[2].to_string(),
            scale,
            estimate: num(4)?,
            std_error: num(5)?,
        });
    }
    Ok(out)
}

pub fn write_lit_crosswalk<W: Write>(writer: W, entries: &[LitStudyEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(LIT_HEADER)?;
    for e in entries {
        let scale = match e.scale {
            Scale::Logit => "logit",
            Scale::Probit => "probit",
        };
        w.write_record([
            e.study.clone(),
            e.year.to_string(),
            e.predictor.clone(),
            scale.to_string(),
            e.estimate.to_string(),
            e.std_error.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("crosswalk", e))?;
    Ok(())
}
