//! Bootstrap confidence intervals, lesion-size strata and the DSC-versus-size
//! regression.

use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::ScanMetrics;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("no finite values to summarize")]
    AllNonFinite,
    #[error("stratification needs at least 4 scans, got {0}")]
    TooFewScans(usize),
    #[error("regressor has zero variance")]
    DegenerateX,
    #[error("x and y must have equal length of at least 2")]
    BadLength,
    #[error("invalid bootstrap configuration: {0}")]
    InvalidConfig(&'static str),
}

type Result<T> = core::result::Result<T, StatsError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { resamples: 10_000, confidence: 0.95, seed: 1 }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resamples == 0 {
            return Err(StatsError::InvalidConfig("resamples must be at least 1"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(StatsError::InvalidConfig("confidence must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = Float::floor(h) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median_sorted(sorted: &[f64]) -> f64 {
    quantile_sorted(sorted, 0.5)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn finite_sorted(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Percentile bootstrap of the mean: `(mean, ci_low, ci_high)`.
///
/// Non-finite values are dropped. The remaining values are sorted before
/// resampling, so the interval depends only on the multiset of values.
pub fn bootstrap_ci(values: &[f64], cfg: &BootstrapConfig) -> Result<(f64, f64, f64)> {
    cfg.validate()?;
    let v = finite_sorted(values);
    if v.is_empty() {
        return Err(StatsError::AllNonFinite);
    }
    let n = v.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut means: Vec<f64> = (0..cfg.resamples)
        .map(|_| (0..n).map(|_| v[rng.gen_range(0..n as u64) as usize]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - cfg.confidence) / 2.0;
    Ok((mean(&v), quantile_sorted(&means, tail), quantile_sorted(&means, 1.0 - tail)))
}

/// Summary of one metric over scans. The statistics are `None` when every
/// value was excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n_scans: usize,
    pub n_excluded_nonfinite: usize,
}

/// Summarizes values where `None` or non-finite entries are excluded.
pub fn summarize(values: &[Option<f64>], cfg: &BootstrapConfig) -> Result<MetricSummary> {
    cfg.validate()?;
    let kept: Vec<f64> = values.iter().filter_map(|v| v.filter(|x| x.is_finite())).collect();
    let excluded = values.len() - kept.len();
    if kept.is_empty() {
        return Ok(MetricSummary {
            mean: None,
            median: None,
            ci_low: None,
            ci_high: None,
            n_scans: values.len(),
            n_excluded_nonfinite: excluded,
        });
    }
    let (m, lo, hi) = bootstrap_ci(&kept, cfg)?;
    Ok(MetricSummary {
        mean: Some(m),
        median: Some(median_sorted(&finite_sorted(&kept))),
        ci_low: Some(lo),
        ci_high: Some(hi),
        n_scans: values.len(),
        n_excluded_nonfinite: excluded,
    })
}

/// Per-metric summaries in a fixed key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub dsc: MetricSummary,
    pub mdsc: MetricSummary,
    pub hd_mm: MetricSummary,
    pub assd_mm: MetricSummary,
    pub tpr: MetricSummary,
    pub precision: MetricSummary,
}

pub fn aggregate(metrics: &[ScanMetrics], cfg: &BootstrapConfig) -> Result<AggregateReport> {
    let col = |f: fn(&ScanMetrics) -> Option<f64>| summarize(&metrics.iter().map(f).collect::<Vec<_>>(), cfg);
    Ok(AggregateReport {
        dsc: col(|m| Some(m.dsc))?,
        mdsc: col(|m| Some(m.mdsc))?,
        hd_mm: col(|m| m.hd_mm)?,
        assd_mm: col(|m| m.assd_mm)?,
        tpr: col(|m| Some(m.tpr))?,
        precision: col(|m| m.precision)?,
    })
}

/// One lesion-size quartile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeGroup {
    pub label: String,
    pub subject_ids: Vec<String>,
    pub lesion_voxels_min: u64,
    pub lesion_voxels_max: u64,
    pub aggregate: AggregateReport,
}

pub const SIZE_GROUP_LABELS: [&str; 4] = ["0-25%", "25-50%", "50-75%", "75-100%"];

/// Group sizes for `n` scans: boundaries at ranks ceil(n/4), ceil(n/2) and
/// ceil(3n/4).
pub fn quartile_sizes(n: usize) -> [usize; 4] {
    let b = [0, n.div_ceil(4), n.div_ceil(2), (3 * n).div_ceil(4), n];
    [b[1] - b[0], b[2] - b[1], b[3] - b[2], b[4] - b[3]]
}

/// Sorts scans by reference lesion size (stable) and splits them into four
/// rank groups.
pub fn stratify_by_lesion_size(metrics: &[ScanMetrics], cfg: &BootstrapConfig) -> Result<Vec<SizeGroup>> {
    if metrics.len() < 4 {
        return Err(StatsError::TooFewScans(metrics.len()));
    }
    let mut order: Vec<&ScanMetrics> = metrics.iter().collect();
    order.sort_by_key(|m| m.lesion_voxels_ref);
    let mut start = 0;
    let mut groups = Vec::with_capacity(4);
    for (label, size) in SIZE_GROUP_LABELS.iter().zip(quartile_sizes(metrics.len())) {
        let members: Vec<ScanMetrics> = order[start..start + size].iter().map(|m| (*m).clone()).collect();
        start += size;
        groups.push(SizeGroup {
            label: (*label).into(),
            subject_ids: members.iter().map(|m| m.subject_id.clone()).collect(),
            lesion_voxels_min: members.first().map_or(0, |m| m.lesion_voxels_ref),
            lesion_voxels_max: members.last().map_or(0, |m| m.lesion_voxels_ref),
            aggregate: aggregate(&members, cfg)?,
        });
    }
    Ok(groups)
}

/// Ordinary least squares fit of y on x with intercept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n: usize,
}

/// OLS fit. R² is 0 when y is constant and is clamped to `[0, 1]` against
/// rounding.
pub fn ols(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(StatsError::BadLength);
    }
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx <= 0.0 || !sxx.is_finite() {
        return Err(StatsError::DegenerateX);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sst: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let r_squared = if sst == 0.0 {
        0.0
    } else {
        let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a) * (b - intercept - slope * a)).sum();
        (1.0 - sse / sst).clamp(0.0, 1.0)
    };
    Ok(LinearFit { slope, intercept, r_squared, n: x.len() })
}

pub fn r_squared(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(ols(x, y)?.r_squared)
}

/// DSC regressed on log10 of the reference lesion voxel count. Scans without
/// reference lesion voxels have no logarithm and are left out.
pub fn dsc_vs_lesion_size(metrics: &[ScanMetrics]) -> Result<LinearFit> {
    let (x, y): (Vec<f64>, Vec<f64>) = metrics
        .iter()
        .filter(|m| m.lesion_voxels_ref > 0)
        .map(|m| (Float::log10(m.lesion_voxels_ref as f64), m.dsc))
        .unzip();
    ols(&x, &y)
}
