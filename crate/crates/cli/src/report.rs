//! Line records and benchmark CSV series.
//!
//! A report line is six tab-separated fields:
//! `suite  case  metric  value  threshold  status`. Values use Rust's shortest
//! round-trip `{:e}` form, so a parsed report compares equal to the original.
//! Lines starting with `#` are comments.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("report line {line}: {detail}")]
pub struct ReportParseError {
    pub line: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    Le(f64),
    Ge(f64),
}

impl Bound {
    pub fn holds(self, value: f64) -> bool {
        match self {
            Bound::Le(t) => value <= t,
            Bound::Ge(t) => value >= t,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Le(t) => write!(f, "<={t:e}"),
            Bound::Ge(t) => write!(f, ">={t:e}"),
        }
    }
}

impl FromStr for Bound {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (ctor, rest): (fn(f64) -> Bound, &str) = if let Some(r) = s.strip_prefix("<=") {
            (Bound::Le, r)
        } else if let Some(r) = s.strip_prefix(">=") {
            (Bound::Ge, r)
        } else {
            return Err(format!("threshold {s:?} must start with <= or >="));
        };
        rest.parse().map(ctor).map_err(|_| format!("bad threshold value {rest:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// A negative control that failed as it should.
    Xfail,
    /// Reported, not asserted.
    Info,
}

impl Status {
    fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Xfail => "XFAIL",
            Status::Info => "INFO",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Status {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [Status::Pass, Status::Fail, Status::Xfail, Status::Info]
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown status {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub suite: String,
    pub case: String,
    pub metric: String,
    pub value: f64,
    pub threshold: Option<Bound>,
    pub status: Status,
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let threshold = self.threshold.map_or_else(|| "-".to_string(), |b| b.to_string());
        write!(
            f,
            "{}\t{}\t{}\t{:e}\t{}\t{}",
            self.suite, self.case, self.metric, self.value, threshold, self.status
        )
    }
}

fn clean(field: &str) -> String {
    field.replace(['\t', '\n', '\r'], " ")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub records: Vec<Record>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, suite: &str, case: &str, metric: &str, value: f64, threshold: Option<Bound>, status: Status) {
        self.records.push(Record {
            suite: clean(suite),
            case: clean(case),
            metric: clean(metric),
            value,
            threshold,
            status,
        });
    }

    /// Asserted case: passes iff `bound` holds. NaN always fails.
    pub fn check(&mut self, suite: &str, case: &str, metric: &str, value: f64, bound: Bound) {
        let status = if bound.holds(value) { Status::Pass } else { Status::Fail };
        self.push(suite, case, metric, value, Some(bound), status);
    }

    /// Negative control: `failing` describes the failure it must show. Meeting
    /// it records XFAIL; anything else is a FAIL.
    pub fn expect_fail(&mut self, suite: &str, case: &str, metric: &str, value: f64, failing: Bound) {
        let status = if failing.holds(value) { Status::Xfail } else { Status::Fail };
        self.push(suite, case, metric, value, Some(failing), status);
    }

    pub fn info(&mut self, suite: &str, case: &str, metric: &str, value: f64) {
        self.push(suite, case, metric, value, None, Status::Info);
    }

    pub fn extend(&mut self, other: Report) {
        self.records.extend(other.records);
    }

    pub fn all_pass(&self) -> bool {
        self.records.iter().all(|r| r.status != Status::Fail)
    }

    pub fn count(&self, status: Status) -> usize {
        self.records.iter().filter(|r| r.status == status).count()
    }

    pub fn failures(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| r.status == Status::Fail)
    }

    /// Records of one suite.
    pub fn suite<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Record> + 'a {
        self.records.iter().filter(move |r| r.suite == name)
    }

    /// Largest value among a suite's records for `metric`.
    pub fn worst(&self, suite: &str, metric: &str) -> Option<f64> {
        self.suite(suite)
            .filter(|r| r.metric == metric)
            .map(|r| r.value)
            .reduce(|a, b| if b > a || b.is_nan() { b } else { a })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_string()).map_err(|e| CliError::io(path, e))
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# suite\tcase\tmetric\tvalue\tthreshold\tstatus")?;
        for r in &self.records {
            writeln!(f, "{r}")?;
        }
        writeln!(
            f,
            "# {} pass, {} fail, {} xfail, {} info",
            self.count(Status::Pass),
            self.count(Status::Fail),
            self.count(Status::Xfail),
            self.count(Status::Info)
        )
    }
}

impl FromStr for Report {
    type Err = ReportParseError;

    fn from_str(text: &str) -> Result<Self, ReportParseError> {
        let mut report = Report::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let err = |detail: String| ReportParseError { line, detail };
            let fields: Vec<&str> = raw.split('\t').collect();
            let [suite, case, metric, value, threshold, status] = fields[..] else {
                return Err(err(format!("expected 6 tab-separated fields, got {}", fields.len())));
            };
            let value: f64 = value.parse().map_err(|_| err(format!("bad value {value:?}")))?;
            let threshold = match threshold {
                "-" => None,
                t => Some(t.parse().map_err(err)?),
            };
            report.records.push(Record {
                suite: suite.to_string(),
                case: case.to_string(),
                metric: metric.to_string(),
                value,
                threshold,
                status: status.parse().map_err(err)?,
            });
        }
        Ok(report)
    }
}

#[derive(Serialize)]
struct CsvRecord<'a> {
    suite: &'a str,
    case: &'a str,
    metric: &'a str,
    value: f64,
    threshold: String,
    status: &'a str,
}

impl Report {
    /// The records as CSV, one row per record.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        for r in &self.records {
            w.serialize(CsvRecord {
                suite: &r.suite,
                case: &r.case,
                metric: &r.metric,
                value: r.value,
                threshold: r.threshold.map_or_else(String::new, |b| b.to_string()),
                status: r.status.as_str(),
            })?;
        }
        w.flush().map_err(|e| CliError::io(path.as_ref(), e))
    }
}

/// One row of a benchmark series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    /// `tokenwise` or `chunked`.
    pub engine: String,
    /// `fwd` or `fwd+bwd`.
    pub pass: String,
    pub precision: String,
    #[serde(rename = "L")]
    pub len: usize,
    /// Empty for the tokenwise engine.
    #[serde(rename = "C")]
    pub chunk: Option<usize>,
    pub d_k: usize,
    pub d_v: usize,
    pub seconds: f64,
    pub tokens_per_second: f64,
}

pub fn write_series(path: impl AsRef<Path>, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CliError::io(path.as_ref(), e))
}

pub fn read_series(path: impl AsRef<Path>) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let rows = r.deserialize().collect::<Result<Vec<BenchRow>, csv::Error>>()?;
    Ok(rows)
}
