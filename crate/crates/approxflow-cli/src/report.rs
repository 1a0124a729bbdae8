//! Machine-readable run reports.
//!
//! CSV is the canonical interface: the fixed header below, one row per key,
//! rows sorted by key, no summary lines. The JSON format mirrors the rows
//! inside a metadata envelope; non-finite numbers serialize as null there
//! (`epsilon` null means unbounded, `relative_bound` null means undefined).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use approxflow::KeyEstimate;
use serde::Serialize;

use crate::CliError;

/// The canonical CSV header.
pub const CSV_HEADER: &str =
    "key,estimate,variance,ci_lo,ci_hi,epsilon,relative_bound,n_level1,degenerate";

/// One per-key report row.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub key: String,
    pub estimate: f64,
    pub variance: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub epsilon: f64,
    pub relative_bound: f64,
    pub n_level1: u64,
    pub degenerate: bool,
}

impl From<&KeyEstimate> for ReportRow {
    fn from(e: &KeyEstimate) -> Self {
        ReportRow {
            key: e.key.clone(),
            estimate: e.tau_hat,
            variance: e.v_hat,
            ci_lo: e.ci_lo,
            ci_hi: e.ci_hi,
            epsilon: e.epsilon,
            relative_bound: e.relative_bound,
            n_level1: e.n_level1,
            degenerate: e.degenerate,
        }
    }
}

/// Error-bound percentiles over the report rows, ceiling-index convention.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct BoundPercentiles {
    pub p10: Option<f64>,
    pub p50: Option<f64>,
    pub p90: Option<f64>,
    pub p100: Option<f64>,
}

/// Empirical percentile at the 1-based index `ceil(P/100 * len)` of the
/// ascending values; ties resolve toward the larger value. NaN entries
/// (undefined bounds) are excluded; infinite entries sort last.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let k = sorted.len();
    let idx = ((p / 100.0) * k as f64).ceil() as usize;
    Some(sorted[idx.clamp(1, k) - 1])
}

pub fn bound_percentiles(rows: &[ReportRow]) -> BoundPercentiles {
    let mut bounds: Vec<f64> = rows
        .iter()
        .map(|r| r.relative_bound)
        .filter(|b| !b.is_nan())
        .collect();
    bounds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    BoundPercentiles {
        p10: percentile(&bounds, 10.0),
        p50: percentile(&bounds, 50.0),
        p90: percentile(&bounds, 90.0),
        p100: percentile(&bounds, 100.0),
    }
}

/// Run metadata recorded in the JSON envelope and the stderr summary.
#[derive(Clone, Debug, Serialize)]
pub struct ReportMetadata {
    pub pipeline: String,
    pub input: String,
    pub mode: String,
    pub partitions_requested: usize,
    pub origin_partition_count: u64,
    pub chosen_partition_count: u64,
    pub partition_rate: f64,
    pub item_rate: f64,
    pub realized_partition_rate: f64,
    pub confidence: f64,
    pub seed: u64,
    pub depth: usize,
    pub level_rates: Vec<f64>,
    pub wall_ms: u128,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
    pub metadata: ReportMetadata,
}

impl RunReport {
    pub fn new(per_key: &BTreeMap<String, KeyEstimate>, metadata: ReportMetadata) -> Self {
        RunReport {
            rows: per_key.values().map(ReportRow::from).collect(),
            metadata,
        }
    }

    pub fn keys_present(&self) -> u64 {
        self.rows.len() as u64
    }

    /// Writes the canonical CSV (rows only; wall time never appears here).
    pub fn write_csv(&self, out: &mut impl Write) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER.split(','))?;
        for r in &self.rows {
            w.write_record([
                r.key.as_str(),
                &format_float(r.estimate),
                &format_float(r.variance),
                &format_float(r.ci_lo),
                &format_float(r.ci_hi),
                &format_float(r.epsilon),
                &format_float(r.relative_bound),
                &r.n_level1.to_string(),
                &r.degenerate.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self, extra: Option<serde_json::Value>) -> serde_json::Value {
        let percentiles = bound_percentiles(&self.rows);
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "key": r.key,
                    "estimate": finite(r.estimate),
                    "variance": finite(r.variance),
                    "ci_lo": finite(r.ci_lo),
                    "ci_hi": finite(r.ci_hi),
                    "epsilon": finite(r.epsilon),
                    "relative_bound": finite(r.relative_bound),
                    "n_level1": r.n_level1,
                    "degenerate": r.degenerate,
                })
            })
            .collect();
        let mut value = serde_json::json!({
            "metadata": self.metadata,
            "summary": {
                "keys_present": self.keys_present(),
                "bound_percentiles": percentiles,
            },
            "rows": rows,
        });
        if let Some(extra) = extra {
            value["tuner"] = extra;
        }
        value
    }

    /// Compact human summary for stderr.
    pub fn summary_line(&self) -> String {
        let p = bound_percentiles(&self.rows);
        let fmt = |x: Option<f64>| match x {
            Some(v) if v.is_finite() => format!("{v:.4}"),
            Some(_) => "inf".to_string(),
            None => "-".to_string(),
        };
        format!(
            "keys={} bounds p10={} p50={} p90={} p100={} rates=({:.4},{:.4}) d={} wall={}ms",
            self.keys_present(),
            fmt(p.p10),
            fmt(p.p50),
            fmt(p.p90),
            fmt(p.p100),
            self.metadata.partition_rate,
            self.metadata.item_rate,
            self.metadata.depth,
            self.metadata.wall_ms
        )
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Shortest round-trip float formatting; infinities print as `inf`, and
/// undefined values as `NaN`.
pub fn format_float(x: f64) -> String {
    format!("{x}")
}

/// Reads rows back from the canonical CSV.
pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    {
        let headers = reader.headers().map_err(|e| CliError::io(path, e))?;
        let expected: Vec<&str> = CSV_HEADER.split(',').collect();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(CliError::Data(format!(
                "{} does not look like a run report (unexpected header)",
                path.display()
            )));
        }
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::io(path, e))?;
        let field = |i: usize| -> Result<&str, CliError> {
            record
                .get(i)
                .ok_or_else(|| CliError::Data(format!("short row in {}", path.display())))
        };
        let num = |i: usize| -> Result<f64, CliError> {
            let s = field(i)?;
            s.parse::<f64>()
                .map_err(|_| CliError::Data(format!("bad number `{s}` in {}", path.display())))
        };
        rows.push(ReportRow {
            key: field(0)?.to_string(),
            estimate: num(1)?,
            variance: num(2)?,
            ci_lo: num(3)?,
            ci_hi: num(4)?,
            epsilon: num(5)?,
            relative_bound: num(6)?,
            n_level1: field(7)?
                .parse()
                .map_err(|_| CliError::Data("bad n_level1".into()))?,
            degenerate: field(8)?
                .parse()
                .map_err(|_| CliError::Data("bad degenerate flag".into()))?,
        });
    }
    Ok(rows)
}

/// Writes an exact-result file: `key,value` rows, no header.
pub fn write_exact(
    out: &mut impl Write,
    exact: &BTreeMap<String, f64>,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for (k, v) in exact {
        w.write_record([k.as_str(), &format_float(*v)])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an exact-result file.
pub fn read_exact(path: &Path) -> Result<BTreeMap<String, f64>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::io(path, e))?;
        let key = record
            .get(0)
            .ok_or_else(|| CliError::Data("empty row in exact file".into()))?;
        let value = record
            .get(1)
            .ok_or_else(|| CliError::Data(format!("missing value for key `{key}`")))?
            .parse::<f64>()
            .map_err(|_| CliError::Data(format!("bad value for key `{key}`")))?;
        out.insert(key.to_string(), value);
    }
    Ok(out)
}
