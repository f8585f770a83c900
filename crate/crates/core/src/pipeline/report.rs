//! Before/after comparison tables over runs or directories of label volumes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::RunManifest;
use crate::morphometrics::{
    measure_sulcus, wilcoxon_signed_rank, InvalidReason, ShiftDirection, SulcusConfig, SulcusMeasurement,
};
use crate::volume::read_labels;

/// JSON-friendly measurement: undefined quantities are `null`, not NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SulcusRecord {
    pub slice: usize,
    pub valid: bool,
    pub reason: Option<InvalidReason>,
    pub sulcus_angle: Option<f64>,
    pub groove_depth: Option<f64>,
    pub lateral_peak: Option<[f64; 2]>,
    pub medial_peak: Option<[f64; 2]>,
    pub trough: Option<[f64; 2]>,
}

impl From<&SulcusMeasurement> for SulcusRecord {
    fn from(m: &SulcusMeasurement) -> Self {
        let v = |x: f64| (m.valid && x.is_finite()).then_some(x);
        let p = |x: [f64; 2]| (m.valid && x.iter().all(|c| c.is_finite())).then_some(x);
        Self {
            slice: m.slice,
            valid: m.valid,
            reason: m.reason,
            sulcus_angle: v(m.sulcus_angle),
            groove_depth: v(m.groove_depth),
            lateral_peak: p(m.lateral_peak),
            medial_peak: p(m.medial_peak),
            trough: p(m.trough),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case: String,
    pub sa_before: Option<f64>,
    pub sa_after: Option<f64>,
    pub tgd_before: Option<f64>,
    pub tgd_after: Option<f64>,
}

impl CaseRow {
    pub fn new(case: impl Into<String>, before: &SulcusRecord, after: &SulcusRecord) -> Self {
        Self {
            case: case.into(),
            sa_before: before.sulcus_angle,
            sa_after: after.sulcus_angle,
            tgd_before: before.groove_depth,
            tgd_after: after.groove_depth,
        }
    }

    pub fn sa_delta(&self) -> Option<f64> {
        Some(self.sa_after? - self.sa_before?)
    }

    pub fn tgd_delta(&self) -> Option<f64> {
        Some(self.tgd_after? - self.tgd_before?)
    }
}

/// Paired test on one metric over the cases where both values exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTest {
    pub metric: String,
    pub n: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
    pub direction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<CaseRow>,
    /// Empty when fewer than five usable pairs exist.
    pub tests: Vec<MetricTest>,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no inputs given")]
    Empty,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: manifest schema mismatch: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Measure { path: PathBuf, message: String },
}

impl ReportError {
    /// 2 for missing or unusable input, 3 for a failure while measuring.
    pub fn exit_code(&self) -> i32 {
        match self {
            ReportError::Measure { .. } => 3,
            _ => 2,
        }
    }
}

fn direction_label(metric: &str, d: ShiftDirection) -> &'static str {
    match (metric, d) {
        (_, ShiftDirection::None) => "no shift",
        ("groove_depth", ShiftDirection::Increase) => "after deeper",
        ("groove_depth", ShiftDirection::Decrease) => "after shallower",
        (_, ShiftDirection::Increase) => "after flatter",
        (_, ShiftDirection::Decrease) => "after sharper",
    }
}

fn paired(rows: &[CaseRow], pick: impl Fn(&CaseRow) -> (Option<f64>, Option<f64>)) -> (Vec<f64>, Vec<f64>) {
    rows.iter()
        .filter_map(|r| match pick(r) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        })
        .unzip()
}

impl Report {
    pub fn from_cases(rows: Vec<CaseRow>) -> Self {
        let mut tests = Vec::new();
        let metrics: [(&str, fn(&CaseRow) -> (Option<f64>, Option<f64>)); 2] = [
            ("sulcus_angle", |r| (r.sa_before, r.sa_after)),
            ("groove_depth", |r| (r.tgd_before, r.tgd_after)),
        ];
        for (metric, pick) in metrics {
            let (before, after) = paired(&rows, pick);
            if let Ok(w) = wilcoxon_signed_rank(&before, &after) {
                tests.push(MetricTest {
                    metric: metric.into(),
                    n: w.n,
                    statistic: w.statistic,
                    p_value: w.p_value,
                    exact: w.exact,
                    direction: direction_label(metric, w.direction).into(),
                });
            }
        }
        Self { rows, tests }
    }

    /// One row per manifest; the case name is the run directory's name.
    pub fn from_manifests(paths: &[PathBuf]) -> Result<Self, ReportError> {
        if paths.is_empty() {
            return Err(ReportError::Empty);
        }
        let mut rows = Vec::new();
        for p in paths {
            let m = RunManifest::load(p)?;
            let meas = m.measurements.as_ref().ok_or_else(|| ReportError::Schema {
                path: p.clone(),
                message: match &m.failure {
                    Some(f) => format!("run failed in stage '{}'", f.stage),
                    None => "no measurements recorded".into(),
                },
            })?;
            let case = m
                .config
                .out_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            rows.push(CaseRow::new(case, &meas.before, &meas.after));
        }
        Ok(Self::from_cases(rows))
    }

    pub fn test(&self, metric: &str) -> Option<&MetricTest> {
        self.tests.iter().find(|t| t.metric == metric)
    }

    /// Line-delimited JSON: one `case` record per row, then one `test`
    /// record per metric.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let v = json!({
                "record": "case",
                "case": r.case,
                "sa_before": r.sa_before,
                "sa_after": r.sa_after,
                "sa_delta": r.sa_delta(),
                "tgd_before": r.tgd_before,
                "tgd_after": r.tgd_after,
                "tgd_delta": r.tgd_delta(),
            });
            out.push_str(&v.to_string());
            out.push('\n');
        }
        for t in &self.tests {
            let mut v = serde_json::to_value(t).expect("test serialises");
            v["record"] = json!("test");
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let width = self.rows.iter().map(|r| r.case.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        writeln!(
            s,
            "{:<width$}  {:>9} {:>9} {:>8}  {:>8} {:>8} {:>7}",
            "case", "SA before", "SA after", "dSA", "TGD bef", "TGD aft", "dTGD"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{:<width$}  {:>9} {:>9} {:>8}  {:>8} {:>8} {:>7}",
                r.case,
                f(r.sa_before, 2),
                f(r.sa_after, 2),
                f(r.sa_delta(), 2),
                f(r.tgd_before, 3),
                f(r.tgd_after, 3),
                f(r.tgd_delta(), 3)
            )
            .unwrap();
        }
        if self.tests.is_empty() {
            writeln!(s, "\nWilcoxon signed-rank: not reported (fewer than 5 usable pairs)").unwrap();
        }
        for t in &self.tests {
            writeln!(
                s,
                "\nWilcoxon {}: n={} W={} p={:.4e} ({}) {}",
                t.metric,
                t.n,
                t.statistic,
                t.p_value,
                if t.exact { "exact" } else { "normal approx." },
                t.direction
            )
            .unwrap();
        }
        s
    }
}

/// Measures every `*.gvol` in `before` against the file of the same name
/// in `after`.
pub fn compare_dirs(before: &Path, after: &Path, cfg: &SulcusConfig) -> Result<Report, ReportError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    let mut names: Vec<_> = std::fs::read_dir(before)
        .map_err(io(before))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "gvol"))
        .filter_map(|p| p.file_name().map(|n| n.to_owned()))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(ReportError::Empty);
    }
    let measure = |p: &Path| -> Result<SulcusRecord, ReportError> {
        let fail = |message: String| ReportError::Measure {
            path: p.to_path_buf(),
            message,
        };
        let labels = read_labels(p).map_err(|e| fail(e.to_string()))?;
        let m = measure_sulcus(&labels, cfg).map_err(|e| fail(e.to_string()))?;
        Ok(SulcusRecord::from(&m))
    };
    let mut rows = Vec::new();
    for n in names {
        let (b, a) = (before.join(&n), after.join(&n));
        if !a.is_file() {
            return Err(ReportError::Io {
                path: a,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no matching file in the after directory"),
            });
        }
        rows.push(CaseRow::new(n.to_string_lossy(), &measure(&b)?, &measure(&a)?));
    }
    Ok(Report::from_cases(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(case: &str, sa: (f64, f64), tgd: (f64, f64)) -> CaseRow {
        CaseRow {
            case: case.into(),
            sa_before: Some(sa.0),
            sa_after: Some(sa.1),
            tgd_before: Some(tgd.0),
            tgd_after: Some(tgd.1),
        }
    }

    #[test]
    fn single_case_has_no_tests() {
        let r = Report::from_cases(vec![row("a", (160.0, 150.0), (1.5, 2.5))]);
        assert_eq!(r.rows.len(), 1);
        assert!(r.tests.is_empty());
        let lines = r.to_json_lines();
        assert_eq!(lines.lines().count(), 1);
        let v: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(v["sa_delta"], json!(-10.0));
        assert!(r.to_text().contains("not reported"));
    }

    #[test]
    fn uniform_deepening_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<CaseRow> = (0..22)
            .map(|i| {
                let tgd: f64 = rng.random_range(1.0..2.0);
                let sa: f64 = rng.random_range(150.0..170.0);
                row(&format!("c{i}"), (sa, sa - rng.random_range(3.0..9.0)), (tgd, tgd + rng.random_range(0.5..1.0)))
            })
            .collect();
        let r = Report::from_cases(rows);
        let t = r.test("groove_depth").unwrap();
        assert_eq!(t.direction, "after deeper");
        assert_eq!(t.n, 22);
        assert!(t.exact);
        // all 22 differences positive: p = 2 / 2^22
        assert!((t.p_value - 2.0 / 4194304.0).abs() < 1e-15);
        assert_eq!(r.test("sulcus_angle").unwrap().direction, "after sharper");
        assert_eq!(r.to_json_lines().lines().count(), 24);
    }

    #[test]
    fn missing_values_are_skipped_in_tests() {
        let mut rows: Vec<CaseRow> = (0..6).map(|i| row(&format!("c{i}"), (160.0, 150.0 + i as f64), (1.0, 2.0 + i as f64))).collect();
        rows[0].tgd_after = None;
        rows[1].tgd_after = None;
        let r = Report::from_cases(rows);
        assert!(r.test("groove_depth").is_none());
        assert_eq!(r.test("sulcus_angle").unwrap().n, 6);
        assert!(r.to_text().contains("-"));
    }

    #[test]
    fn empty_inputs_are_usage_errors() {
        let e = Report::from_manifests(&[]).unwrap_err();
        assert!(matches!(e, ReportError::Empty));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn foreign_json_is_a_schema_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        std::fs::write(&p, r#"{"schema": "other/2"}"#).unwrap();
        let e = Report::from_manifests(&[p]).unwrap_err();
        assert!(matches!(e, ReportError::Schema { .. }), "{e}");
    }

    #[test]
    fn invalid_measurements_serialise_as_null() {
        let m = SulcusMeasurement {
            slice: 3,
            lateral_peak: [f64::NAN; 2],
            medial_peak: [f64::NAN; 2],
            trough: [f64::NAN; 2],
            sulcus_angle: f64::NAN,
            groove_depth: f64::NAN,
            valid: false,
            reason: Some(InvalidReason::NoPeaks),
        };
        let rec = SulcusRecord::from(&m);
        let text = serde_json::to_string(&rec).unwrap();
        assert!(text.contains("\"sulcus_angle\":null"));
        assert_eq!(serde_json::from_str::<SulcusRecord>(&text).unwrap(), rec);
    }
}
