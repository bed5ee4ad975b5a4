//! Evaluation and ablation reports, and their text tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use zoomseg_core::metrics::{micro_dsc, MetricsError, ScanMetrics};
use zoomseg_core::stats::{aggregate, dsc_vs_lesion_size, stratify_by_lesion_size, AggregateReport, BootstrapConfig, LinearFit, MetricSummary, SizeGroup, StatsError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no scans to report on")]
    Empty,
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("unsupported report version {0}")]
    UnsupportedVersion(u32),
}

type Result<T> = std::result::Result<T, ReportError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format_version: u32,
    pub system: String,
    pub threshold: f64,
    pub bootstrap: BootstrapConfig,
    pub per_scan: Vec<ScanMetrics>,
    pub aggregate: AggregateReport,
    pub micro_dsc: f64,
    /// Lesion-size quartiles; absent with fewer than four scans.
    pub stratified: Option<Vec<SizeGroup>>,
    /// DSC against log10 reference lesion voxels; absent when undefined.
    pub regression: Option<LinearFit>,
}

struct Derived {
    aggregate: AggregateReport,
    micro_dsc: f64,
    stratified: Option<Vec<SizeGroup>>,
    regression: Option<LinearFit>,
}

fn derive(per_scan: &[ScanMetrics], bootstrap: &BootstrapConfig) -> Result<Derived> {
    if per_scan.is_empty() {
        return Err(ReportError::Empty);
    }
    Ok(Derived {
        aggregate: aggregate(per_scan, bootstrap)?,
        micro_dsc: micro_dsc(per_scan)?,
        stratified: if per_scan.len() >= 4 { Some(stratify_by_lesion_size(per_scan, bootstrap)?) } else { None },
        regression: dsc_vs_lesion_size(per_scan).ok(),
    })
}

impl EvaluationReport {
    pub fn build(system: &str, threshold: f64, bootstrap: BootstrapConfig, per_scan: Vec<ScanMetrics>) -> Result<Self> {
        let d = derive(&per_scan, &bootstrap)?;
        Ok(Self {
            format_version: FORMAT_VERSION,
            system: system.into(),
            threshold,
            bootstrap,
            per_scan,
            aggregate: d.aggregate,
            micro_dsc: d.micro_dsc,
            stratified: d.stratified,
            regression: d.regression,
        })
    }

    /// Recomputes everything derivable from `per_scan` and lists each
    /// disagreement. Comparison is exact.
    pub fn verify(&self) -> Result<Vec<String>> {
        let mut issues = Vec::new();
        for m in &self.per_scan {
            let c = &m.confusion;
            let id = &m.subject_id;
            if m.dsc != c.dsc() {
                issues.push(format!("{id}: dsc {} but confusion gives {}", m.dsc, c.dsc()));
            }
            if m.tpr != c.tpr() {
                issues.push(format!("{id}: tpr {} but confusion gives {}", m.tpr, c.tpr()));
            }
            if m.precision != c.precision() {
                issues.push(format!("{id}: precision {:?} but confusion gives {:?}", m.precision, c.precision()));
            }
            if m.lesion_voxels_ref != c.tp + c.fn_ {
                issues.push(format!("{id}: lesion_voxels_ref {} but tp + fn = {}", m.lesion_voxels_ref, c.tp + c.fn_));
            }
        }
        let d = derive(&self.per_scan, &self.bootstrap)?;
        if d.aggregate != self.aggregate {
            issues.push("aggregate differs from recomputation".into());
        }
        if d.micro_dsc != self.micro_dsc {
            issues.push(format!("micro_dsc {} but recomputed {}", self.micro_dsc, d.micro_dsc));
        }
        if d.stratified != self.stratified {
            issues.push("stratified groups differ from recomputation".into());
        }
        if d.regression != self.regression {
            issues.push(format!("regression {:?} but recomputed {:?}", self.regression, d.regression));
        }
        Ok(issues)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_json())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r: Self = read_json(path.as_ref())?;
        if r.format_version != FORMAT_VERSION {
            return Err(ReportError::UnsupportedVersion(r.format_version));
        }
        Ok(r)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| ReportError::Io { path: path.display().to_string(), source })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io { path: p.clone(), source })?;
    serde_json::from_str(&text).map_err(|source| ReportError::Json { path: p, source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemColumn {
    pub system: String,
    pub micro_dsc: f64,
    pub aggregate: AggregateReport,
}

/// One metric of an ablation; `delta` is `b - a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub metric: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub format_version: u32,
    pub a: SystemColumn,
    pub b: SystemColumn,
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_METRICS: [&str; 7] = ["micro_dsc", "dsc", "mdsc", "hd_mm", "assd_mm", "tpr", "precision"];

fn column(r: &EvaluationReport) -> SystemColumn {
    SystemColumn { system: r.system.clone(), micro_dsc: r.micro_dsc, aggregate: r.aggregate.clone() }
}

fn metric_mean(c: &SystemColumn, metric: &str) -> Option<f64> {
    let a = &c.aggregate;
    match metric {
        "micro_dsc" => Some(c.micro_dsc),
        "dsc" => a.dsc.mean,
        "mdsc" => a.mdsc.mean,
        "hd_mm" => a.hd_mm.mean,
        "assd_mm" => a.assd_mm.mean,
        "tpr" => a.tpr.mean,
        "precision" => a.precision.mean,
        _ => None,
    }
}

impl AblationReport {
    /// Compares `a` (the baseline) with `b`.
    pub fn compare(a: &EvaluationReport, b: &EvaluationReport) -> Self {
        let (a, b) = (column(a), column(b));
        let rows = ABLATION_METRICS
            .iter()
            .map(|&m| {
                let (x, y) = (metric_mean(&a, m), metric_mean(&b, m));
                AblationRow { metric: m.into(), a: x, b: y, delta: x.zip(y).map(|(x, y)| y - x) }
            })
            .collect();
        Self { format_version: FORMAT_VERSION, a, b, rows }
    }

    pub fn delta(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).and_then(|r| r.delta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &(serde_json::to_string_pretty(self).expect("report serializes") + "\n"))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

/// `mean (lo-hi)` with `decimals` places, or `n/a`.
pub fn fmt_summary(s: &MetricSummary, decimals: usize) -> String {
    match (s.mean, s.ci_low, s.ci_high) {
        (Some(m), Some(lo), Some(hi)) => format!("{m:.decimals$} ({lo:.decimals$}-{hi:.decimals$})"),
        (Some(m), _, _) => format!("{m:.decimals$}"),
        _ => "n/a".into(),
    }
}

fn fmt_delta(d: Option<f64>, decimals: usize) -> String {
    match d {
        Some(d) if d >= 0.0 => format!("+{d:.decimals$}"),
        Some(d) => format!("{d:.decimals$}"),
        None => "n/a".into(),
    }
}

fn decimals(metric: &str) -> usize {
    if metric.ends_with("_mm") {
        1
    } else {
        2
    }
}

/// One row per system with DSC, mDSC, HD, ASSD, TPR and precision.
pub fn table_summary(reports: &[&EvaluationReport]) -> String {
    let mut s = String::from("Methods\tDSC\tmDSC\tHD (mm)\tASSD (mm)\tTPR\tPrecision\n");
    for r in reports {
        let a = &r.aggregate;
        let cells = [(&a.dsc, 2), (&a.mdsc, 2), (&a.hd_mm, 1), (&a.assd_mm, 1), (&a.tpr, 2), (&a.precision, 2)];
        let _ = write!(s, "{}", r.system);
        for (m, d) in cells {
            let _ = write!(s, "\t{}", fmt_summary(m, d));
        }
        s.push('\n');
    }
    s
}

/// Lesion-size quartile rows.
pub fn table_stratified(r: &EvaluationReport) -> Option<String> {
    let groups = r.stratified.as_ref()?;
    let mut s = String::from("Percentile in per-sample lesion size distribution\tDSC\tHD (mm)\tASSD (mm)\tTPR\tPrecision\n");
    for g in groups {
        let a = &g.aggregate;
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            g.label,
            fmt_summary(&a.dsc, 2),
            fmt_summary(&a.hd_mm, 1),
            fmt_summary(&a.assd_mm, 1),
            fmt_summary(&a.tpr, 2),
            fmt_summary(&a.precision, 2)
        );
    }
    Some(s)
}

/// Baseline row, comparison row and a signed delta row.
pub fn table_ablation(r: &AblationReport) -> String {
    let mut s = String::from("Methods\tmicroDSC\tDSC\tHD (mm)\tASSD (mm)\tTPR\tPrecision\n");
    for c in [&r.a, &r.b] {
        let a = &c.aggregate;
        let _ = writeln!(
            s,
            "{}\t{:.2}\t{}\t{}\t{}\t{}\t{}",
            c.system,
            c.micro_dsc,
            fmt_summary(&a.dsc, 2),
            fmt_summary(&a.hd_mm, 1),
            fmt_summary(&a.assd_mm, 1),
            fmt_summary(&a.tpr, 2),
            fmt_summary(&a.precision, 2)
        );
    }
    s.push('Δ');
    for m in ["micro_dsc", "dsc", "hd_mm", "assd_mm", "tpr", "precision"] {
        let _ = write!(s, "\t{}", fmt_delta(r.delta(m), decimals(m)));
    }
    s.push('\n');
    s
}

/// Fit line for the DSC against lesion size scatter.
pub fn regression_line(r: &EvaluationReport) -> String {
    match &r.regression {
        Some(f) => format!("DSC vs log10(lesion voxels): R^2 = {:.2}, slope {:.3}, intercept {:.3}, n = {}", f.r_squared, f.slope, f.intercept, f.n),
        None => "DSC vs log10(lesion voxels): undefined".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use zoomseg_core::metrics::Confusion;

    fn scan(id: &str, tp: u64, fp: u64, fn_: u64, hd: Option<f64>) -> ScanMetrics {
        let c = Confusion { tp, fp, fn_, tn: 1000 - tp - fp - fn_ };
        ScanMetrics {
            subject_id: id.into(),
            dsc: c.dsc(),
            mdsc: c.dsc(),
            mdsc_threshold: 0.5,
            hd_mm: hd,
            assd_mm: hd.map(|h| h / 4.0),
            tpr: c.tpr(),
            precision: c.precision(),
            lesion_voxels_ref: tp + fn_,
            confusion: c,
        }
    }

    fn report() -> EvaluationReport {
        let scans = vec![
            scan("a", 10, 5, 3, Some(4.0)),
            scan("b", 50, 10, 20, Some(9.5)),
            scan("c", 0, 4, 8, None),
            scan("d", 200, 30, 10, Some(2.0)),
            scan("e", 5, 0, 40, Some(12.0)),
        ];
        EvaluationReport::build("3D-ResU-Net", 0.5, BootstrapConfig { resamples: 500, ..BootstrapConfig::default() }, scans).unwrap()
    }

    #[test]
    fn json_round_trip_verifies_cleanly() {
        let r = report();
        let back: EvaluationReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(back.verify().unwrap().is_empty());
        assert!(back.stratified.is_some());
        assert!(back.regression.is_some());
    }

    #[test]
    fn tampering_is_reported() {
        let mut r = report();
        r.aggregate.dsc.mean = r.aggregate.dsc.mean.map(|m| m + 1e-12);
        assert_eq!(r.verify().unwrap().len(), 1);
        let mut r = report();
        r.per_scan[0].dsc = 0.9;
        let issues = r.verify().unwrap();
        assert!(issues.iter().any(|i| i.starts_with("a: dsc")));
        let mut r = report();
        r.micro_dsc = 0.0;
        assert_eq!(r.verify().unwrap().len(), 1);
    }

    #[test]
    fn small_reports_skip_stratification() {
        let r = EvaluationReport::build("x", 0.5, BootstrapConfig::default(), vec![scan("a", 1, 1, 1, Some(1.0))]).unwrap();
        assert!(r.stratified.is_none() && r.regression.is_none());
        assert!(r.verify().unwrap().is_empty());
        assert!(table_stratified(&r).is_none());
    }

    #[test]
    fn formatting() {
        let s = MetricSummary { mean: Some(0.641), median: Some(0.7), ci_low: Some(0.514), ci_high: Some(0.756), n_scans: 31, n_excluded_nonfinite: 0 };
        assert_eq!(fmt_summary(&s, 2), "0.64 (0.51-0.76)");
        let s = MetricSummary { mean: Some(20.44), ci_low: Some(10.0), ci_high: Some(33.31), ..s };
        assert_eq!(fmt_summary(&s, 1), "20.4 (10.0-33.3)");
        assert_eq!(fmt_delta(Some(0.06), 2), "+0.06");
        assert_eq!(fmt_delta(Some(-14.7), 1), "-14.7");
    }

    #[test]
    fn ablation_deltas_are_b_minus_a() {
        let a = report();
        let mut scans = a.per_scan.clone();
        scans[0] = scan("a", 13, 2, 0, Some(1.0));
        let b = EvaluationReport::build("3D-ResU-Net", 0.5, a.bootstrap, scans).unwrap();
        let mut a = a;
        a.system = "3D-ResU-Net-F".into();
        let ab = AblationReport::compare(&a, &b);
        assert_eq!(ab.delta("micro_dsc"), Some(b.micro_dsc - a.micro_dsc));
        assert!(ab.delta("micro_dsc").unwrap() > 0.0);
        let table = table_ablation(&ab);
        assert!(table.lines().nth(1).unwrap().starts_with("3D-ResU-Net-F\t"));
        assert!(table.lines().nth(3).unwrap().starts_with("Δ\t+"));
    }
}
