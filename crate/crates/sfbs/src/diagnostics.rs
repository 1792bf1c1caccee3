//! Run traces, quasi-Fejér auditing, partial-sum monitors, and CSV/JSON
//! export with bit-faithful re-import.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spaces::format_f64;

pub const TRACE_FORMAT_LINE: &str = "# sfbs-trace v1";

/// Per-iteration scalar records plus thinned state snapshots.
///
/// Rows are keyed by the iteration column `n` and are strictly increasing.
/// Metrics that were not recorded for a row hold NaN; a column that was never
/// recorded is absent entirely.
#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// `(n, flattened state)` pairs; always includes the initial state and
    /// the final one when the producing run stores snapshots at all.
    pub snapshots: Vec<(usize, Vec<f64>)>,
    pub seed: u64,
    pub config_digest: String,
    pub x0_norm: f64,
}

impl RunTrace {
    pub fn new(columns: Vec<String>, seed: u64, config_digest: String, x0_norm: f64) -> Self {
        Self {
            columns,
            rows: Vec::new(),
            snapshots: Vec::new(),
            seed,
            config_digest,
            x0_norm,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Shape(format!(
                "trace row has {} fields, expected {}",
                row.len(),
                self.columns.len()
            )));
        }
        if let Some(last) = self.rows.last() {
            if row[0] <= last[0] {
                return Err(Error::Shape("trace rows must be strictly increasing in n".into()));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn push_snapshot(&mut self, n: usize, state: &DVector<f64>) {
        self.snapshots.push((n, state.as_slice().to_vec()));
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }

    pub fn last_value(&self, name: &str) -> Option<f64> {
        let idx = self.column_index(name)?;
        self.rows.last().map(|r| r[idx])
    }

    pub fn final_state(&self) -> Option<DVector<f64>> {
        self.snapshots
            .last()
            .map(|(_, s)| DVector::from_column_slice(s))
    }
}

/// One-step and cumulative distance increases against a summable budget.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FejerReport {
    pub z_label: String,
    pub max_single_increase: f64,
    pub cumulative_increase: f64,
    pub budget: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Distances to a reference point may rise only within `budget` overall
/// (plus a floating-point tolerance scaled by the starting norm).
pub fn fejer_monitor(trace: &RunTrace, dist_column: &str, budget: f64) -> Result<FejerReport> {
    let series = trace
        .column(dist_column)
        .ok_or_else(|| Error::Shape(format!("trace has no column {dist_column:?}")))?;
    let series: Vec<f64> = series.into_iter().filter(|v| v.is_finite()).collect();
    let mut max_inc = 0.0f64;
    let mut cum_inc = 0.0f64;
    for w in series.windows(2) {
        let inc = w[1] - w[0];
        if inc > 0.0 {
            max_inc = max_inc.max(inc);
            cum_inc += inc;
        }
    }
    let tolerance = 1e-12 * (1.0 + trace.x0_norm);
    Ok(FejerReport {
        z_label: dist_column.to_string(),
        max_single_increase: max_inc,
        cumulative_increase: cum_inc,
        budget,
        tolerance,
        pass: cum_inc <= budget + tolerance,
    })
}

/// Same monitor on a raw distance series (used by tests and direct callers).
pub fn fejer_monitor_series(series: &[f64], budget: f64, x0_norm: f64) -> FejerReport {
    let mut max_inc = 0.0f64;
    let mut cum_inc = 0.0f64;
    for w in series.windows(2) {
        let inc = w[1] - w[0];
        if inc > 0.0 {
            max_inc = max_inc.max(inc);
            cum_inc += inc;
        }
    }
    let tolerance = 1e-12 * (1.0 + x0_norm);
    FejerReport {
        z_label: "series".into(),
        max_single_increase: max_inc,
        cumulative_increase: cum_inc,
        budget,
        tolerance,
        pass: cum_inc <= budget + tolerance,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeriesSummability {
    pub total: f64,
    /// Fraction of the total contributed by the last half of the series;
    /// `None` for series too short to split.
    pub tail_fraction: Option<f64>,
    /// Heuristic flag: the last-half average summand is not smaller than the
    /// first-half average, which a convergent series should not exhibit.
    pub non_summable_trend: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummabilityReport {
    pub z_label: String,
    pub s1: SeriesSummability,
    pub s2: SeriesSummability,
}

fn summarize_series(series: &[f64]) -> SeriesSummability {
    let vals: Vec<f64> = series.iter().cloned().filter(|v| v.is_finite()).collect();
    let total: f64 = vals.iter().sum();
    if vals.len() < 2 {
        return SeriesSummability {
            total,
            tail_fraction: None,
            non_summable_trend: false,
        };
    }
    let half = vals.len() / 2;
    let tail: f64 = vals[half..].iter().sum();
    let head: f64 = vals[..half].iter().sum();
    let tail_fraction = if total > 0.0 { Some(tail / total) } else { Some(0.0) };
    let head_avg = head / half as f64;
    let tail_avg = tail / (vals.len() - half) as f64;
    SeriesSummability {
        total,
        tail_fraction,
        non_summable_trend: total > 0.0 && tail_avg >= head_avg * 0.99,
    }
}

/// Partial sums of the two audited series for one reference point: the
/// weighted squared drift of the forward operator values and the weighted
/// squared shifted fixed-point gap.
pub fn summability_report(trace: &RunTrace, z_index: usize) -> Result<SummabilityReport> {
    let s1_col = format!("s1_z{z_index}");
    let s2_col = format!("s2_z{z_index}");
    let s1 = trace.column(&s1_col).ok_or_else(|| {
        Error::Config(format!(
            "trace has no {s1_col:?} column; enable exact-field auditing (run.audit_exact) and provide z_ref"
        ))
    })?;
    let s2 = trace.column(&s2_col).ok_or_else(|| {
        Error::Config(format!(
            "trace has no {s2_col:?} column; enable exact-field auditing (run.audit_exact) and provide z_ref"
        ))
    })?;
    Ok(SummabilityReport {
        z_label: format!("z{z_index}"),
        s1: summarize_series(&s1),
        s2: summarize_series(&s2),
    })
}

pub fn summarize_partial_sums(series: &[f64]) -> SeriesSummability {
    summarize_series(series)
}

/// Least-squares slope and intercept of `ln(y)` against `ln(x)` over the
/// pairs with positive finite values; `None` with fewer than two usable
/// points.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-30 {
        return None;
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    Some((slope, intercept))
}

// ---------------------------------------------------------------------------
// Export / import
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceSidecar {
    pub version: String,
    pub seed: u64,
    pub config_digest: String,
    pub x0_norm: f64,
    pub columns: Vec<String>,
    pub snapshots: Vec<(usize, Vec<f64>)>,
    #[serde(default)]
    pub verdicts: BTreeMap<String, serde_json::Value>,
}

pub fn trace_to_csv(trace: &RunTrace) -> String {
    let mut out = String::new();
    out.push_str(TRACE_FORMAT_LINE);
    out.push('\n');
    out.push_str(&trace.columns.join(","));
    out.push('\n');
    for row in &trace.rows {
        let cells: Vec<String> = row.iter().map(|v| format_f64(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn trace_from_csv(text: &str, sidecar: Option<&TraceSidecar>) -> Result<RunTrace> {
    let mut lines = text.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Shape("empty trace CSV".into()))?;
    if first.trim() != TRACE_FORMAT_LINE {
        return Err(Error::Shape(format!(
            "unexpected trace format line {first:?}, expected {TRACE_FORMAT_LINE:?}"
        )));
    }
    let header = lines
        .next()
        .ok_or_else(|| Error::Shape("trace CSV missing header".into()))?;
    let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Shape(format!("bad CSV value {tok:?}: {e}")))
            })
            .collect();
        let row = row?;
        if row.len() != columns.len() {
            return Err(Error::Shape("CSV row width mismatch".into()));
        }
        rows.push(row);
    }
    let (seed, digest, x0_norm, snapshots) = match sidecar {
        Some(sc) => (
            sc.seed,
            sc.config_digest.clone(),
            sc.x0_norm,
            sc.snapshots.clone(),
        ),
        None => (0, String::new(), 0.0, Vec::new()),
    };
    Ok(RunTrace {
        columns,
        rows,
        snapshots,
        seed,
        config_digest: digest,
        x0_norm,
    })
}

/// Writes `<path>` as CSV plus a `.json` sidecar next to it carrying the
/// seed, config digest, snapshots, and any verdicts.
pub fn export_trace(
    trace: &RunTrace,
    path: &Path,
    verdicts: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    std::fs::write(path, trace_to_csv(trace))?;
    let sidecar = TraceSidecar {
        version: "v1".into(),
        seed: trace.seed,
        config_digest: trace.config_digest.clone(),
        x0_norm: trace.x0_norm,
        columns: trace.columns.clone(),
        snapshots: trace.snapshots.clone(),
        verdicts,
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Config(format!("sidecar serialization failed: {e}")))?;
    std::fs::write(path.with_extension("json"), json)?;
    Ok(())
}

pub fn import_trace(path: &Path) -> Result<RunTrace> {
    let text = std::fs::read_to_string(path)?;
    let sidecar_path = path.with_extension("json");
    let sidecar = if sidecar_path.exists() {
        let raw = std::fs::read_to_string(&sidecar_path)?;
        Some(
            serde_json::from_str::<TraceSidecar>(&raw)
                .map_err(|e| Error::Config(format!("bad trace sidecar: {e}")))?,
        )
    } else {
        None
    };
    trace_from_csv(&text, sidecar.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist_trace(dists: &[f64]) -> RunTrace {
        let mut t = RunTrace::new(vec!["n".into(), "dist_z0".into()], 1, "d".into(), 4.0);
        for (i, d) in dists.iter().enumerate() {
            t.push_row(vec![i as f64, *d]).unwrap();
        }
        t
    }

    #[test]
    fn fejer_passes_on_nonincreasing_series() {
        let t = dist_trace(&[4.0, 2.0, 1.0, 0.5]);
        let r = fejer_monitor(&t, "dist_z0", 0.0).unwrap();
        assert!(r.pass);
        assert_eq!(r.cumulative_increase, 0.0);
    }

    #[test]
    fn fejer_fails_when_increase_exceeds_budget() {
        let t = dist_trace(&[4.0, 2.0, 2.05, 1.0]);
        let r = fejer_monitor(&t, "dist_z0", 0.04).unwrap();
        assert!(!r.pass);
        assert!((r.cumulative_increase - 0.05).abs() < 1e-12);
        // A slightly bigger budget covers it.
        assert!(fejer_monitor(&t, "dist_z0", 0.06).unwrap().pass);
    }

    #[test]
    fn fejer_missing_column_is_error() {
        let t = dist_trace(&[1.0]);
        assert!(fejer_monitor(&t, "dist_z9", 0.0).is_err());
    }

    #[test]
    fn summability_flags_constant_series() {
        let mut t = RunTrace::new(
            vec!["n".into(), "s1_z0".into(), "s2_z0".into()],
            0,
            String::new(),
            0.0,
        );
        for i in 0..100 {
            t.push_row(vec![i as f64, 1.0, 1.0]).unwrap();
        }
        let r = summability_report(&t, 0).unwrap();
        assert!(r.s1.non_summable_trend);
        assert!((r.s1.tail_fraction.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn summability_single_row_not_applicable() {
        let mut t = RunTrace::new(
            vec!["n".into(), "s1_z0".into(), "s2_z0".into()],
            0,
            String::new(),
            0.0,
        );
        t.push_row(vec![0.0, 0.7, 0.1]).unwrap();
        let r = summability_report(&t, 0).unwrap();
        assert_eq!(r.s1.total, 0.7);
        assert!(r.s1.tail_fraction.is_none());
    }

    #[test]
    fn summability_geometric_series_converges() {
        let mut t = RunTrace::new(
            vec!["n".into(), "s1_z0".into(), "s2_z0".into()],
            0,
            String::new(),
            0.0,
        );
        for i in 0..200 {
            let v = 0.9f64.powi(i);
            t.push_row(vec![i as f64, v, v]).unwrap();
        }
        let r = summability_report(&t, 0).unwrap();
        assert!(r.s1.tail_fraction.unwrap() <= 0.1);
        assert!(!r.s1.non_summable_trend);
    }

    #[test]
    fn rows_must_be_strictly_increasing() {
        let mut t = RunTrace::new(vec!["n".into()], 0, String::new(), 0.0);
        t.push_row(vec![0.0]).unwrap();
        assert!(t.push_row(vec![0.0]).is_err());
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let mut t = RunTrace::new(
            vec!["n".into(), "residual".into(), "dist_z0".into()],
            42,
            "abcd".into(),
            1.25,
        );
        t.push_row(vec![0.0, 0.1 + 0.2, f64::NAN]).unwrap();
        t.push_row(vec![1.0, 1.0 / 3.0, 2e-300]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        export_trace(&t, &path, BTreeMap::new()).unwrap();
        let back = import_trace(&path).unwrap();
        assert_eq!(back.columns, t.columns);
        assert_eq!(back.seed, t.seed);
        assert_eq!(back.rows.len(), t.rows.len());
        for (a, b) in t.rows.iter().zip(&back.rows) {
            for (x, y) in a.iter().zip(b) {
                assert!(x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()));
            }
        }
        // Re-export is byte-identical.
        let again = trace_to_csv(&back);
        assert_eq!(again, trace_to_csv(&t));
    }

    #[test]
    fn empty_trace_exports_header_only() {
        let t = RunTrace::new(vec!["n".into(), "residual".into()], 0, String::new(), 0.0);
        let csv = trace_to_csv(&t);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], TRACE_FORMAT_LINE);
        assert_eq!(lines[1], "n,residual");
    }
}
