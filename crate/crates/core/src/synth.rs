//! Seedable brain-like volumes with hypointense lesions.
//!
//! A scan is a dark background with a bright, slowly varying ellipsoid of
//! "tissue". Lesions are ellipsoids warped by a low-frequency sinusoidal
//! displacement, placed inside the tissue without overlapping each other,
//! and darkened by `lesion_offset`. Gaussian noise is added everywhere.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::volume::{coords, linear_index, Mask, Volume};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(&'static str),
    #[error("could not place the lesions of scan {index} inside the tissue")]
    LesionDoesNotFit { index: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    /// Inclusive range of lesion blobs per scan.
    pub n_lesions: [u32; 2],
    /// Inclusive range of the total lesion volume of a scan with lesions.
    pub lesion_volume_mm3: [f64; 2],
    pub background_mean: f64,
    pub background_std: f64,
    pub tissue_mean: f64,
    /// Amplitude of the smooth intensity variation inside the tissue.
    pub tissue_std: f64,
    /// Added to lesion voxels; negative means darker than tissue.
    pub lesion_offset: f64,
    pub noise_std: f64,
    /// Tissue ellipsoid semi-axes as a fraction of each extent.
    pub tissue_semi_axis: f64,
    /// Upper cap on total lesion volume as a fraction of the tissue volume.
    pub max_lesion_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            extents: [48, 48, 48],
            spacing: [1.0; 3],
            n_lesions: [1, 3],
            lesion_volume_mm3: [10.0, 2.8e5],
            background_mean: 0.0,
            background_std: 0.02,
            tissue_mean: 1.0,
            tissue_std: 0.05,
            lesion_offset: -0.6,
            noise_std: 0.1,
            tissue_semi_axis: 0.35,
            max_lesion_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Scan geometry of the public stroke dataset: 197×233×189 at 1 mm.
    pub fn paper_shaped() -> Self {
        Self { extents: [197, 233, 189], ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        use SynthError::InvalidConfig as E;
        if self.extents.contains(&0) {
            return Err(E("extents must be positive"));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(E("spacing must be positive"));
        }
        if self.n_lesions[0] > self.n_lesions[1] {
            return Err(E("n_lesions range is reversed"));
        }
        let [lo, hi] = self.lesion_volume_mm3;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(E("lesion volume range must be positive and ordered"));
        }
        if [self.background_std, self.tissue_std, self.noise_std].iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(E("standard deviations must be non-negative"));
        }
        if !(self.tissue_semi_axis > 0.0 && self.tissue_semi_axis <= 0.5) {
            return Err(E("tissue_semi_axis must lie in (0, 0.5]"));
        }
        if !(self.max_lesion_fraction > 0.0 && self.max_lesion_fraction <= 1.0) {
            return Err(E("max_lesion_fraction must lie in (0, 1]"));
        }
        if self.n_lesions[1] > 0 && self.effective_volume_range()[1] < lo {
            return Err(E("lesion volume range does not fit inside the tissue"));
        }
        Ok(())
    }

    fn voxel_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    fn tissue_semi_axes_mm(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.tissue_semi_axis * self.extents[a] as f64 * self.spacing[a])
    }

    /// The configured lesion volume range with its top clipped to
    /// `max_lesion_fraction` of the tissue ellipsoid.
    pub fn effective_volume_range(&self) -> [f64; 2] {
        let [a, b, c] = self.tissue_semi_axes_mm();
        let tissue = 4.0 / 3.0 * PI * a * b * c;
        let [lo, hi] = self.lesion_volume_mm3;
        [lo, hi.min(self.max_lesion_fraction * tissue)]
    }
}

fn center_mm(extents: [usize; 3], spacing: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| (extents[a] as f64 - 1.0) / 2.0 * spacing[a])
}

fn position_mm(p: [usize; 3], spacing: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| p[a] as f64 * spacing[a])
}

fn in_tissue(cfg: &SynthConfig, p: [usize; 3]) -> bool {
    let c = center_mm(cfg.extents, cfg.spacing);
    let r = cfg.tissue_semi_axes_mm();
    let q = position_mm(p, cfg.spacing);
    (0..3).map(|a| ((q[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

/// Shape parameters of one lesion; only the scale varies during fitting.
struct Blob {
    center: [f64; 3],
    axes: [f64; 3],
    phase: [f64; 3],
    freq: f64,
    warp: f64,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, center: [f64; 3]) -> Self {
        let mut axes = [0.0; 3].map(|_| rng.gen_range(0.6..1.4));
        let norm = Float::cbrt(axes.iter().product::<f64>());
        axes.iter_mut().for_each(|a| *a /= norm);
        Self {
            center,
            axes,
            phase: [0.0; 3].map(|_| rng.gen_range(0.0..2.0 * PI)),
            freq: rng.gen_range(1.0..2.5),
            warp: rng.gen_range(0.05..0.25),
        }
    }

    fn contains(&self, q: [f64; 3], scale: f64) -> bool {
        let u = [0, 1, 2].map(|a| q[a] - self.center[a]);
        let mut acc = 0.0;
        for a in 0..3 {
            let b = (a + 1) % 3;
            let warped = u[a] + self.warp * scale * Float::sin(self.freq * u[b] / scale + self.phase[a]);
            acc += (warped / self.axes[a]).powi(2);
        }
        acc <= scale * scale
    }

    /// Voxels covered at `scale`, clipped to the grid.
    fn voxels(&self, extents: [usize; 3], spacing: [f64; 3], scale: f64) -> Vec<[usize; 3]> {
        let reach = scale * (1.0 + self.warp) * self.axes.iter().copied().fold(0.0, f64::max) + 1.0;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let l = Float::floor((self.center[a] - reach) / spacing[a]).max(0.0);
            let h = Float::ceil((self.center[a] + reach) / spacing[a]).min(extents[a] as f64 - 1.0);
            lo[a] = l as usize;
            hi[a] = h.max(l) as usize;
        }
        let mut out = Vec::new();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let p = [x, y, z];
                    if self.contains(position_mm(p, spacing), scale) {
                        out.push(p);
                    }
                }
            }
        }
        out
    }
}

const SCAN_ATTEMPTS: usize = 32;
const PLACEMENT_ATTEMPTS: usize = 64;

/// Draws lesion masks until the total volume lands in range.
fn place_lesions(cfg: &SynthConfig, rng: &mut ChaCha8Rng, index: u64) -> Result<Vec<u8>, SynthError> {
    let e = cfg.extents;
    let n = rng.gen_range(cfg.n_lesions[0]..=cfg.n_lesions[1]) as usize;
    let mut mask = vec![0u8; e.iter().product()];
    if n == 0 {
        return Ok(mask);
    }
    let [vmin, vmax] = cfg.effective_volume_range();
    let voxel = cfg.voxel_mm3();
    'scan: for _ in 0..SCAN_ATTEMPTS {
        mask.iter_mut().for_each(|v| *v = 0);
        let total = Float::exp(rng.gen_range(Float::ln(vmin)..=Float::ln(vmax)));
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
        let wsum: f64 = weights.iter().sum();
        for w in &weights {
            let target = (total * w / wsum / voxel).max(1.0);
            if !place_one(cfg, rng, &mut mask, target) {
                continue 'scan;
            }
        }
        let got = mask.iter().filter(|&&v| v == 1).count() as f64 * voxel;
        if got >= vmin && got <= vmax {
            return Ok(mask);
        }
    }
    Err(SynthError::LesionDoesNotFit { index })
}

/// Places one blob of about `target` voxels inside the tissue, away from
/// existing lesions. Returns false when no position works.
fn place_one(cfg: &SynthConfig, rng: &mut ChaCha8Rng, mask: &mut [u8], target: f64) -> bool {
    let e = cfg.extents;
    let s = cfg.spacing;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let p = [0, 1, 2].map(|a| rng.gen_range(0..e[a] as u64) as usize);
        if !in_tissue(cfg, p) || mask[linear_index(e, p)] == 1 {
            continue;
        }
        let blob = Blob::random(rng, position_mm(p, s));
        // Largest scale whose voxel count stays at or below the target,
        // never below a single voxel.
        let mut lo = 0.0f64;
        let mut hi = Float::cbrt(3.0 * target * cfg.voxel_mm3() / (4.0 * PI)) * 2.0 + 1.0;
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if blob.voxels(e, s, mid).len() as f64 <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut vox = blob.voxels(e, s, lo);
        if vox.is_empty() {
            vox = blob.voxels(e, s, hi);
        }
        if vox.is_empty() {
            continue;
        }
        let fits = vox.iter().all(|&q| in_tissue(cfg, q) && mask[linear_index(e, q)] == 0);
        if fits {
            for q in vox {
                mask[linear_index(e, q)] = 1;
            }
            return true;
        }
    }
    false
}

/// Smooth tissue texture with values in `[-1, 1]`.
fn tissue_field(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> impl Fn([usize; 3]) -> f64 {
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let k = [0, 1, 2].map(|a| rng.gen_range(0.5..2.0) * 2.0 * PI / cfg.extents[a] as f64);
            (k, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    move |p| {
        let s: f64 = waves.iter().map(|(k, ph)| Float::sin(k[0] * p[0] as f64 + k[1] * p[1] as f64 + k[2] * p[2] as f64 + ph)).sum();
        s / waves.len() as f64
    }
}

/// Scan `index` of the configured family: deterministic in `(cfg.seed, index)`.
pub fn generate_scan(cfg: &SynthConfig, index: u64) -> Result<(Volume, Mask), SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let lesions = place_lesions(cfg, &mut rng, index)?;
    let field = tissue_field(cfg, &mut rng);
    let e = cfg.extents;
    let mut data = Vec::with_capacity(lesions.len());
    for (i, &les) in lesions.iter().enumerate() {
        let p = coords(e, i);
        let z1: f64 = StandardNormal.sample(&mut rng);
        let z2: f64 = StandardNormal.sample(&mut rng);
        let base = if in_tissue(cfg, p) {
            cfg.tissue_mean + cfg.tissue_std * field(p)
        } else {
            cfg.background_mean + cfg.background_std * z1
        };
        let lesion = if les == 1 { cfg.lesion_offset } else { 0.0 };
        data.push(base + lesion + cfg.noise_std * z2);
    }
    let image = Volume::new(e, cfg.spacing, data).expect("grid matches config");
    let mask = Mask::new(e, cfg.spacing, lesions).expect("binary by construction");
    Ok((image, mask))
}

/// Index ranges of the train, dev and test scans of a generated dataset.
pub fn split_indices(n_train: u64, n_dev: u64, n_test: u64) -> [core::ops::Range<u64>; 3] {
    [0..n_train, n_train..n_train + n_dev, n_train + n_dev..n_train + n_dev + n_test]
}
