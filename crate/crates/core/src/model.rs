//! Call-attempt data model and the discrete-time logistic hazard likelihood.
//!
//! Each contact attempt is one row; the per-attempt log-odds of a completed
//! screener is linear in the design row, whose first element is the
//! intercept. Categorical covariates use reference-cell coding.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const INTERCEPT: &str = "intercept";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CovariateKind {
    Numeric,
    Categorical { levels: Vec<String>, reference: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Covariate {
    pub name: String,
    pub kind: CovariateKind,
}

impl Covariate {
    pub fn numeric(name: impl Into<String>) -> Self {
        Covariate {
            name: name.into(),
            kind: CovariateKind::Numeric,
        }
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        levels: impl IntoIterator<Item = S>,
        reference: impl Into<String>,
    ) -> Self {
        Covariate {
            name: name.into(),
            kind: CovariateKind::Categorical {
                levels: levels.into_iter().map(Into::into).collect(),
                reference: reference.into(),
            },
        }
    }
}

/// Ordered covariate declarations and the coefficient layout they imply.
///
/// Layout: index 0 is the intercept, then one slot per numeric entry and one
/// per non-reference level of each categorical entry, in declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<EntryRepr>", into = "Vec<EntryRepr>")]
pub struct CovariateSchema {
    entries: Vec<Covariate>,
    names: Vec<String>,
}

impl CovariateSchema {
    pub fn new(entries: Vec<Covariate>) -> Result<Self> {
        let mut names = vec![INTERCEPT.to_string()];
        for entry in &entries {
            if entry.name.is_empty() {
                return Err(Error::InvalidSchema("empty covariate name".into()));
            }
            if RESERVED_COLUMNS.contains(&entry.name.as_str()) {
                return Err(Error::InvalidSchema(format!(
                    "`{}` is a reserved column name",
                    entry.name
                )));
            }
            match &entry.kind {
                CovariateKind::Numeric => names.push(entry.name.clone()),
                CovariateKind::Categorical { levels, reference } => {
                    if levels.len() < 2 {
                        return Err(Error::InvalidSchema(format!(
                            "categorical `{}` needs at least two levels",
                            entry.name
                        )));
                    }
                    if !levels.contains(reference) {
                        return Err(Error::InvalidSchema(format!(
                            "reference `{reference}` is not a level of `{}`",
                            entry.name
                        )));
                    }
                    for (i, level) in levels.iter().enumerate() {
                        if levels[..i].contains(level) {
                            return Err(Error::InvalidSchema(format!(
                                "duplicate level `{level}` in `{}`",
                                entry.name
                            )));
                        }
                        if level != reference {
                            names.push(format!("{}={}", entry.name, level));
                        }
                    }
                }
            }
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(Error::InvalidSchema(format!(
                    "duplicate coefficient name `{name}`"
                )));
            }
        }
        Ok(CovariateSchema { entries, names })
    }

    /// A schema of `k` numeric covariates named `x1..xk`.
    pub fn numeric(k: usize) -> Self {
        Self::new((1..=k).map(|i| Covariate::numeric(format!("x{i}"))).collect())
            .expect("generated names are unique")
    }

    pub fn entries(&self) -> &[Covariate] {
        &self.entries
    }

    pub fn coefficient_count(&self) -> usize {
        self.names.len()
    }

    /// Coefficient names: `intercept`, numeric names, and `name=level` for
    /// each non-reference categorical level.
    pub fn coefficient_names(&self) -> &[String] {
        &self.names
    }

    pub fn coefficient_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Short stable hash of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Column names of the call-record CSV that precede the covariates.
pub const RESERVED_COLUMNS: [&str; 5] = ["quarter", "case_id", "day", "attempt", "outcome"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KindTag {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryRepr {
    name: String,
    kind: KindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    levels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference: Option<String>,
}

impl TryFrom<Vec<EntryRepr>> for CovariateSchema {
    type Error = Error;

    fn try_from(reprs: Vec<EntryRepr>) -> Result<Self> {
        let entries = reprs
            .into_iter()
            .map(|r| match r.kind {
                KindTag::Numeric => {
                    if r.levels.is_some() || r.reference.is_some() {
                        return Err(Error::InvalidSchema(format!(
                            "numeric `{}` cannot declare levels",
                            r.name
                        )));
                    }
                    Ok(Covariate::numeric(r.name))
                }
                KindTag::Categorical => {
                    let levels = r.levels.ok_or_else(|| {
                        Error::InvalidSchema(format!("categorical `{}` lacks levels", r.name))
                    })?;
                    let reference = r.reference.unwrap_or_else(|| levels[0].clone());
                    Ok(Covariate::categorical(r.name, levels, reference))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        CovariateSchema::new(entries)
    }
}

impl From<CovariateSchema> for Vec<EntryRepr> {
    fn from(schema: CovariateSchema) -> Self {
        schema
            .entries
            .into_iter()
            .map(|c| match c.kind {
                CovariateKind::Numeric => EntryRepr {
                    name: c.name,
                    kind: KindTag::Numeric,
                    levels: None,
                    reference: None,
                },
                CovariateKind::Categorical { levels, reference } => EntryRepr {
                    name: c.name,
                    kind: KindTag::Categorical,
                    levels: Some(levels),
                    reference: Some(reference),
                },
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CovariateValue {
    Number(f64),
    Level(String),
}

impl From<f64> for CovariateValue {
    fn from(v: f64) -> Self {
        CovariateValue::Number(v)
    }
}

impl From<&str> for CovariateValue {
    fn from(v: &str) -> Self {
        CovariateValue::Level(v.to_string())
    }
}

impl std::fmt::Display for CovariateValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CovariateValue::Number(v) => write!(f, "{v}"),
            CovariateValue::Level(s) => f.write_str(s),
        }
    }
}

/// One contact attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct CallRecord {
    pub quarter: i64,
    pub case_id: String,
    /// Day of quarter, 1-based.
    pub day: u32,
    /// Attempt index within the case, 1-based.
    pub attempt: u32,
    pub outcome: bool,
    pub covariates: BTreeMap<String, CovariateValue>,
}

/// Encode a record into a design row (leading 1 for the intercept).
pub fn build_design_row(record: &CallRecord, schema: &CovariateSchema) -> Result<Vec<f64>> {
    let mut row = Vec::with_capacity(schema.coefficient_count());
    row.push(1.0);
    for entry in schema.entries() {
        let value = record
            .covariates
            .get(&entry.name)
            .ok_or_else(|| Error::MissingCovariate(entry.name.clone()))?;
        match (&entry.kind, value) {
            (CovariateKind::Numeric, CovariateValue::Number(v)) => {
                if !v.is_finite() {
                    return Err(Error::InvalidRecord(format!(
                        "non-finite value for `{}`",
                        entry.name
                    )));
                }
                row.push(*v);
            }
            (CovariateKind::Numeric, CovariateValue::Level(s)) => {
                return Err(Error::InvalidRecord(format!(
                    "`{}` is numeric but got `{s}`",
                    entry.name
                )))
            }
            (CovariateKind::Categorical { levels, reference }, value) => {
                let level = match value {
                    CovariateValue::Level(s) => s.clone(),
                    CovariateValue::Number(v) => v.to_string(),
                };
                if !levels.contains(&level) {
                    return Err(Error::UnknownLevel {
                        name: entry.name.clone(),
                        value: level,
                    });
                }
                for l in levels.iter().filter(|l| *l != reference) {
                    row.push(if *l == level { 1.0 } else { 0.0 });
                }
            }
        }
    }
    Ok(row)
}

/// Identifies the record a design row came from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RowKey {
    pub quarter: i64,
    pub case_id: String,
    pub day: u32,
    pub attempt: u32,
}

/// Design matrix (row-major) with binary outcomes.
#[derive(Debug, Clone)]
pub struct Dataset {
    schema: Arc<CovariateSchema>,
    dim: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    keys: Vec<RowKey>,
}

impl Dataset {
    pub fn empty(schema: Arc<CovariateSchema>) -> Self {
        let dim = schema.coefficient_count();
        Dataset {
            schema,
            dim,
            x: Vec::new(),
            y: Vec::new(),
            keys: Vec::new(),
        }
    }

    pub fn from_records(schema: Arc<CovariateSchema>, records: &[CallRecord]) -> Result<Self> {
        let mut data = Dataset::empty(schema);
        for r in records {
            let row = build_design_row(r, &data.schema)?;
            data.x.extend_from_slice(&row);
            data.y.push(if r.outcome { 1.0 } else { 0.0 });
            data.keys.push(RowKey {
                quarter: r.quarter,
                case_id: r.case_id.clone(),
                day: r.day,
                attempt: r.attempt,
            });
        }
        Ok(data)
    }

    /// Build from raw design rows over a generic numeric schema. Each row
    /// must start with the intercept 1.
    pub fn from_rows(rows: &[Vec<f64>], outcomes: &[bool]) -> Result<Self> {
        if rows.len() != outcomes.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                found: outcomes.len(),
            });
        }
        let dim = rows.first().map_or(1, Vec::len);
        if dim == 0 {
            return Err(Error::InvalidRecord("empty design row".into()));
        }
        let mut data = Dataset::empty(Arc::new(CovariateSchema::numeric(dim - 1)));
        for (i, (row, &y)) in rows.iter().zip(outcomes).enumerate() {
            data.push(
                row,
                y,
                RowKey {
                    quarter: 0,
                    case_id: i.to_string(),
                    day: 1,
                    attempt: 1,
                },
            )?;
        }
        Ok(data)
    }

    pub fn push(&mut self, row: &[f64], outcome: bool, key: RowKey) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: row.len(),
            });
        }
        if row[0] != 1.0 {
            return Err(Error::InvalidRecord(
                "design row must start with the intercept 1".into(),
            ));
        }
        self.x.extend_from_slice(row);
        self.y.push(if outcome { 1.0 } else { 0.0 });
        self.keys.push(key);
        Ok(())
    }

    pub fn schema(&self) -> &Arc<CovariateSchema> {
        &self.schema
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn outcome(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.y
    }

    pub fn key(&self, i: usize) -> &RowKey {
        &self.keys[i]
    }

    pub fn keys(&self) -> &[RowKey] {
        &self.keys
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.x.chunks_exact(self.dim).zip(self.y.iter().copied())
    }

    pub fn successes(&self) -> usize {
        self.y.iter().filter(|&&y| y > 0.5).count()
    }

    /// The first `n` rows.
    pub fn prefix(&self, n: usize) -> Dataset {
        let n = n.min(self.n_rows());
        Dataset {
            schema: Arc::clone(&self.schema),
            dim: self.dim,
            x: self.x[..n * self.dim].to_vec(),
            y: self.y[..n].to_vec(),
            keys: self.keys[..n].to_vec(),
        }
    }

    /// Rows at the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(Arc::clone(&self.schema));
        for &i in indices {
            out.x.extend_from_slice(self.row(i));
            out.y.push(self.y[i]);
            out.keys.push(self.keys[i].clone());
        }
        out
    }

    /// Concatenate rows of another dataset with the same layout.
    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        self.x.extend_from_slice(&other.x);
        self.y.extend_from_slice(&other.y);
        self.keys.extend_from_slice(&other.keys);
        Ok(())
    }
}

/// Logistic function, evaluated without overflow for any finite input.
pub fn inverse_logit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(eta))` without overflow.
pub fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dim(beta: &[f64], data: &Dataset) -> Result<()> {
    if beta.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            found: beta.len(),
        });
    }
    Ok(())
}

pub(crate) fn log_likelihood_unchecked(beta: &[f64], data: &Dataset) -> f64 {
    data.rows()
        .map(|(x, y)| {
            let eta = dot(beta, x);
            y * eta - softplus(eta)
        })
        .sum()
}

/// Bernoulli log-likelihood `sum(y*eta - log(1 + exp(eta)))`.
pub fn log_likelihood(beta: &[f64], data: &Dataset) -> Result<f64> {
    check_dim(beta, data)?;
    Ok(log_likelihood_unchecked(beta, data))
}

pub fn log_likelihood_gradient(beta: &[f64], data: &Dataset) -> Result<DVector<f64>> {
    check_dim(beta, data)?;
    let mut grad = DVector::zeros(data.dim());
    for (x, y) in data.rows() {
        let r = y - inverse_logit(dot(beta, x));
        for (g, xj) in grad.iter_mut().zip(x) {
            *g += r * xj;
        }
    }
    Ok(grad)
}

pub fn log_likelihood_hessian(beta: &[f64], data: &Dataset) -> Result<DMatrix<f64>> {
    check_dim(beta, data)?;
    let (_, _, info) = score_and_information(beta, data);
    Ok(-info)
}

/// Log-likelihood, score and observed information (`-Hessian`) in one pass.
pub(crate) fn score_and_information(
    beta: &[f64],
    data: &Dataset,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let p = data.dim();
    let mut ll = 0.0;
    let mut grad = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    for (x, y) in data.rows() {
        let eta = dot(beta, x);
        let mu = inverse_logit(eta);
        ll += y * eta - softplus(eta);
        let r = y - mu;
        let w = mu * (1.0 - mu);
        for j in 0..p {
            grad[j] += r * x[j];
            let wx = w * x[j];
            if wx != 0.0 {
                for k in 0..=j {
                    info[(j, k)] += wx * x[k];
                }
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            info[(k, j)] = info[(j, k)];
        }
    }
    (ll, grad, info)
}
