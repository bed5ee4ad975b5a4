//! Per-scan overlap and surface metrics.
//!
//! Surfaces are voxel centers: a foreground voxel belongs to the surface when
//! one of its six face neighbours is background or lies outside the volume.
//! Distances are Euclidean in millimetres.

use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::volume::{coords, linear_index, Mask, Volume};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("masks or volumes are on different grids")]
    ExtentMismatch,
    #[error("no scans to aggregate")]
    EmptyInput,
    #[error("threshold grid must be non-empty with values in (0, 1)")]
    BadGrid,
}

type Result<T> = core::result::Result<T, MetricsError>;

/// Voxel confusion counts of a binary prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2tp / (2tp + fp + fn)`, with 1.0 when both masks are empty.
    pub fn dsc(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    /// Sensitivity; 1.0 when the reference is empty.
    pub fn tpr(&self) -> f64 {
        let den = self.tp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }

    /// `None` when the prediction is empty.
    pub fn precision(&self) -> Option<f64> {
        let den = self.tp + self.fp;
        (den > 0).then(|| self.tp as f64 / den as f64)
    }
}

fn check_grid(a: &Mask, b: &Mask) -> Result<()> {
    if a.same_grid(b) {
        Ok(())
    } else {
        Err(MetricsError::ExtentMismatch)
    }
}

pub fn confusion(pred: &Mask, reference: &Mask) -> Result<Confusion> {
    check_grid(pred, reference)?;
    let mut c = Confusion::default();
    for (&p, &r) in pred.data().iter().zip(reference.data()) {
        match (p, r) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn dsc(pred: &Mask, reference: &Mask) -> Result<f64> {
    Ok(confusion(pred, reference)?.dsc())
}

pub fn tpr_precision(pred: &Mask, reference: &Mask) -> Result<(f64, Option<f64>)> {
    let c = confusion(pred, reference)?;
    Ok((c.tpr(), c.precision()))
}

/// Thresholds 0.01, 0.02, ..., 0.99.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..100).map(|i| i as f64 / 100.0).collect()
}

/// Best DSC over a threshold sweep, as `(mdsc, threshold)`. Ties go to the
/// smallest threshold.
///
/// Equivalent to binarizing at every grid value, but done in one pass: each
/// voxel is bucketed by how many thresholds it clears.
pub fn max_dsc(prob: &Volume, reference: &Mask, grid: &[f64]) -> Result<(f64, f64)> {
    if prob.extents() != reference.extents() || prob.spacing() != reference.spacing() {
        return Err(MetricsError::ExtentMismatch);
    }
    if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(MetricsError::BadGrid);
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    // cleared[k] counts voxels that pass exactly the k smallest thresholds.
    let mut cleared_ref = alloc::vec![0u64; sorted.len() + 1];
    let mut cleared_bg = alloc::vec![0u64; sorted.len() + 1];
    for (&p, &r) in prob.data().iter().zip(reference.data()) {
        let k = sorted.partition_point(|&t| p >= t);
        if r == 1 {
            cleared_ref[k] += 1;
        } else {
            cleared_bg[k] += 1;
        }
    }
    let n_ref: u64 = cleared_ref.iter().sum();
    let mut tp = n_ref - cleared_ref[0];
    let mut fp: u64 = cleared_bg[1..].iter().sum();
    let mut best = (f64::NEG_INFINITY, sorted[0]);
    for (j, &t) in sorted.iter().enumerate() {
        if j > 0 {
            tp -= cleared_ref[j];
            fp -= cleared_bg[j];
        }
        let c = Confusion { tp, fp, fn_: n_ref - tp, tn: 0 };
        let d = c.dsc();
        if d > best.0 {
            best = (d, t);
        }
    }
    Ok(best)
}

/// Surface voxels of a mask with the grid spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePointSet {
    /// Voxel coordinates `(x, y, z)` in storage order.
    pub points: Vec<[usize; 3]>,
    pub spacing: [f64; 3],
}

pub fn extract_surface(m: &Mask) -> SurfacePointSet {
    let e = m.extents();
    let data = m.data();
    let mut points = Vec::new();
    for (i, &v) in data.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let p = coords(e, i);
        let exposed = (0..3).any(|a| {
            if p[a] == 0 || p[a] + 1 == e[a] {
                return true;
            }
            let mut lo = p;
            lo[a] -= 1;
            let mut hi = p;
            hi[a] += 1;
            data[linear_index(e, lo)] == 0 || data[linear_index(e, hi)] == 0
        });
        if exposed {
            points.push(p);
        }
    }
    SurfacePointSet { points, spacing: m.spacing() }
}

/// Squared distance in mm between two voxel centers.
#[inline]
pub fn squared_distance_mm(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    let mut acc = 0.0;
    for k in 0..3 {
        let d = (a[k] as f64 - b[k] as f64) * spacing[k];
        acc += d * d;
    }
    acc
}

/// Exact nearest-neighbour queries over voxel coordinates.
struct KdTree {
    /// Points arranged so that each subslice's midpoint is the splitting node.
    points: Vec<[usize; 3]>,
    spacing: [f64; 3],
}

impl KdTree {
    fn new(mut points: Vec<[usize; 3]>, spacing: [f64; 3]) -> Self {
        Self::build(&mut points, 0);
        Self { points, spacing }
    }

    fn build(pts: &mut [[usize; 3]], axis: usize) {
        if pts.len() <= 1 {
            return;
        }
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by_key(mid, |p| p[axis]);
        let (lo, rest) = pts.split_at_mut(mid);
        Self::build(lo, (axis + 1) % 3);
        Self::build(&mut rest[1..], (axis + 1) % 3);
    }

    /// Smallest squared distance from `q` to any point.
    fn nearest(&self, q: [usize; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(&self.points, 0, q, &mut best);
        best
    }

    fn search(&self, pts: &[[usize; 3]], axis: usize, q: [usize; 3], best: &mut f64) {
        if pts.is_empty() {
            return;
        }
        let mid = pts.len() / 2;
        let node = pts[mid];
        let d = squared_distance_mm(q, node, self.spacing);
        if d < *best {
            *best = d;
        }
        let (lo, hi) = (&pts[..mid], &pts[mid + 1..]);
        let (near, far) = if q[axis] < node[axis] { (lo, hi) } else { (hi, lo) };
        let next = (axis + 1) % 3;
        self.search(near, next, q, best);
        // Every point on the far side is at least this far along `axis`, and
        // adding non-negative terms never rounds a sum below one of them.
        let gap = (q[axis] as f64 - node[axis] as f64) * self.spacing[axis];
        if gap * gap <= *best {
            self.search(far, next, q, best);
        }
    }
}

/// Hausdorff distance and average symmetric surface distance in mm.
/// `None` when either surface is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub hd_mm: Option<f64>,
    pub assd_mm: Option<f64>,
}

/// Nearest-surface distance for every point of `from`, in order.
pub fn directed_distances(from: &SurfacePointSet, to: &SurfacePointSet) -> Vec<f64> {
    let tree = KdTree::new(to.points.clone(), to.spacing);
    from.points.iter().map(|&p| Float::sqrt(tree.nearest(p))).collect()
}

/// HD is the larger of the two directed maxima; ASSD sums the pred-to-ref
/// distances first, then ref-to-pred, and divides by the total point count.
pub fn surface_distances(pred: &Mask, reference: &Mask) -> Result<SurfaceDistances> {
    check_grid(pred, reference)?;
    let p = extract_surface(pred);
    let r = extract_surface(reference);
    if p.points.is_empty() || r.points.is_empty() {
        return Ok(SurfaceDistances { hd_mm: None, assd_mm: None });
    }
    let dp = directed_distances(&p, &r);
    let dr = directed_distances(&r, &p);
    let mut hd = 0.0f64;
    let mut sum = 0.0f64;
    for &d in dp.iter().chain(&dr) {
        hd = hd.max(d);
        sum += d;
    }
    Ok(SurfaceDistances { hd_mm: Some(hd), assd_mm: Some(sum / (dp.len() + dr.len()) as f64) })
}

/// Everything reported for one scan. Optional fields are `None` when the
/// metric is undefined for the scan and are excluded from aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanMetrics {
    pub subject_id: String,
    pub dsc: f64,
    pub mdsc: f64,
    pub mdsc_threshold: f64,
    pub hd_mm: Option<f64>,
    pub assd_mm: Option<f64>,
    pub tpr: f64,
    pub precision: Option<f64>,
    pub lesion_voxels_ref: u64,
    pub confusion: Confusion,
}

/// Scores a probability map against its reference. `threshold` defines the
/// binary prediction; `grid` drives the maximal DSC.
pub fn evaluate_scan(subject_id: &str, prob: &Volume, reference: &Mask, threshold: f64, grid: &[f64]) -> Result<ScanMetrics> {
    let pred = crate::volume::binarize(prob, threshold);
    let (mdsc, mdsc_threshold) = max_dsc(prob, reference, grid)?;
    scan_metrics_from_masks(subject_id, &pred, reference, Some((mdsc, mdsc_threshold)))
}

/// Metrics of a binary prediction. Without probabilities the maximal DSC is
/// the DSC itself, reported at threshold 0.5.
pub fn scan_metrics_from_masks(
    subject_id: &str,
    pred: &Mask,
    reference: &Mask,
    mdsc: Option<(f64, f64)>,
) -> Result<ScanMetrics> {
    let c = confusion(pred, reference)?;
    let sd = surface_distances(pred, reference)?;
    let (mdsc, mdsc_threshold) = mdsc.unwrap_or((c.dsc(), 0.5));
    Ok(ScanMetrics {
        subject_id: subject_id.into(),
        dsc: c.dsc(),
        mdsc,
        mdsc_threshold,
        hd_mm: sd.hd_mm,
        assd_mm: sd.assd_mm,
        tpr: c.tpr(),
        precision: c.precision(),
        lesion_voxels_ref: c.tp + c.fn_,
        confusion: c,
    })
}

/// DSC of the voxel counts pooled over all scans.
pub fn micro_dsc(metrics: &[ScanMetrics]) -> Result<f64> {
    if metrics.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut pooled = Confusion::default();
    for m in metrics {
        pooled.tp += m.confusion.tp;
        pooled.fp += m.confusion.fp;
        pooled.fn_ += m.confusion.fn_;
        pooled.tn += m.confusion.tn;
    }
    Ok(pooled.dsc())
}
