//! Scalar volumes, binary masks and the geometric operations used by the
//! zoom-in/zoom-out pipeline: center cropping, zero padding back to the full
//! scan, random sub-volume sampling and intensity normalization.
//!
//! Voxel storage is x-fastest: `index = x + nx * (y + ny * z)`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Errors from volume construction and geometry.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VolumeError {
    #[error("extents must be positive, got {0:?}")]
    EmptyExtents([usize; 3]),
    #[error("spacing must be positive and finite, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("data length {len} does not match extents {extents:?}")]
    LengthMismatch { extents: [usize; 3], len: usize },
    #[error("mask voxels must be 0 or 1")]
    NonBinaryMask,
    #[error("crop {crop:?} exceeds volume extents {extents:?}")]
    CropTooLarge { crop: [usize; 3], extents: [usize; 3] },
    #[error("window {window:?} is inconsistent with volume {volume:?} inside {full:?}")]
    WindowMismatch { window: CropWindow, volume: [usize; 3], full: [usize; 3] },
    #[error("patch {patch:?} exceeds volume extents {extents:?}")]
    PatchTooLarge { patch: [usize; 3], extents: [usize; 3] },
    #[error("image {image:?} and mask {mask:?} differ in extents or spacing")]
    ExtentMismatch { image: [usize; 3], mask: [usize; 3] },
    #[error("lesion-centered fraction {0} is outside [0, 1]")]
    BadFraction(f64),
}

fn check_geometry(extents: [usize; 3], spacing: [f64; 3], len: usize) -> Result<(), VolumeError> {
    if extents.contains(&0) {
        return Err(VolumeError::EmptyExtents(extents));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(VolumeError::BadSpacing(spacing));
    }
    if len != extents.iter().product::<usize>() {
        return Err(VolumeError::LengthMismatch { extents, len });
    }
    Ok(())
}

/// A 3D scalar grid with physical voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
}

/// A 3D binary grid with physical voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    extents: [usize; 3],
    spacing_bits: [u64; 3],
    data: Vec<u8>,
}

/// Placement of a cropped sub-volume inside its parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub offset: [usize; 3],
    pub extents: [usize; 3],
}

impl CropWindow {
    /// Whether the window lies inside `parent`.
    pub fn fits(&self, parent: [usize; 3]) -> bool {
        (0..3).all(|a| self.offset[a] + self.extents[a] <= parent[a])
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.offset[a] && p[a] < self.offset[a] + self.extents[a])
    }
}

#[inline]
pub(crate) fn linear_index(extents: [usize; 3], p: [usize; 3]) -> usize {
    p[0] + extents[0] * (p[1] + extents[1] * p[2])
}

#[inline]
pub(crate) fn coords(extents: [usize; 3], i: usize) -> [usize; 3] {
    let x = i % extents[0];
    let r = i / extents[0];
    [x, r % extents[1], r / extents[1]]
}

fn crop_slice<T: Copy>(src: &[T], extents: [usize; 3], w: &CropWindow) -> Vec<T> {
    let [cx, cy, cz] = w.extents;
    let mut out = Vec::with_capacity(cx * cy * cz);
    for z in 0..cz {
        for y in 0..cy {
            let start = linear_index(extents, [w.offset[0], w.offset[1] + y, w.offset[2] + z]);
            out.extend_from_slice(&src[start..start + cx]);
        }
    }
    out
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self, VolumeError> {
        check_geometry(extents, spacing, data.len())?;
        Ok(Self { extents, spacing, data })
    }

    pub fn filled(extents: [usize; 3], spacing: [f64; 3], value: f64) -> Result<Self, VolumeError> {
        Self::new(extents, spacing, vec![value; extents.iter().product()])
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, p: [usize; 3]) -> f64 {
        self.data[linear_index(self.extents, p)]
    }

    pub fn set(&mut self, p: [usize; 3], v: f64) {
        let i = linear_index(self.extents, p);
        self.data[i] = v;
    }

    /// Copies the voxels inside `window`.
    pub fn crop(&self, window: &CropWindow) -> Result<Volume, VolumeError> {
        if !window.fits(self.extents) || window.extents.contains(&0) {
            return Err(VolumeError::CropTooLarge { crop: window.extents, extents: self.extents });
        }
        Ok(Volume { extents: window.extents, spacing: self.spacing, data: crop_slice(&self.data, self.extents, window) })
    }
}

impl Mask {
    /// Builds a mask, rejecting any voxel that is not 0 or 1.
    pub fn new(extents: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self, VolumeError> {
        check_geometry(extents, spacing, data.len())?;
        if data.iter().any(|&v| v > 1) {
            return Err(VolumeError::NonBinaryMask);
        }
        Ok(Self { extents, spacing_bits: spacing.map(f64::to_bits), data })
    }

    pub fn empty(extents: [usize; 3], spacing: [f64; 3]) -> Result<Self, VolumeError> {
        Self::new(extents, spacing, vec![0; extents.iter().product()])
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing_bits.map(f64::from_bits)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, p: [usize; 3]) -> bool {
        self.data[linear_index(self.extents, p)] == 1
    }

    pub fn set(&mut self, p: [usize; 3], on: bool) {
        let i = linear_index(self.extents, p);
        self.data[i] = on as u8;
    }

    /// Number of foreground voxels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing().iter().product()
    }

    /// Foreground volume in cubic millimetres.
    pub fn lesion_volume_mm3(&self) -> f64 {
        self.count() as f64 * self.voxel_volume_mm3()
    }

    /// Coordinates of all foreground voxels in storage order.
    pub fn foreground(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let e = self.extents;
        self.data.iter().enumerate().filter(|(_, &v)| v == 1).map(move |(i, _)| coords(e, i))
    }

    pub fn crop(&self, window: &CropWindow) -> Result<Mask, VolumeError> {
        if !window.fits(self.extents) || window.extents.contains(&0) {
            return Err(VolumeError::CropTooLarge { crop: window.extents, extents: self.extents });
        }
        Ok(Mask { extents: window.extents, spacing_bits: self.spacing_bits, data: crop_slice(&self.data, self.extents, window) })
    }

    /// The mask as a 0/1 volume.
    pub fn to_volume(&self) -> Volume {
        Volume { extents: self.extents, spacing: self.spacing(), data: self.data.iter().map(|&v| f64::from(v)).collect() }
    }

    pub fn same_grid(&self, other: &Mask) -> bool {
        self.extents == other.extents && self.spacing_bits == other.spacing_bits
    }
}

/// Crops the central `extents` of `v`.
///
/// The offset on each axis is `floor((parent - crop) / 2)`.
pub fn center_crop(v: &Volume, extents: [usize; 3]) -> Result<(Volume, CropWindow), VolumeError> {
    let window = center_window(v.extents(), extents)?;
    Ok((v.crop(&window)?, window))
}

/// The window [`center_crop`] would use, without copying voxels.
pub fn center_window(parent: [usize; 3], extents: [usize; 3]) -> Result<CropWindow, VolumeError> {
    if extents.contains(&0) || (0..3).any(|a| extents[a] > parent[a]) {
        return Err(VolumeError::CropTooLarge { crop: extents, extents: parent });
    }
    Ok(CropWindow { offset: [0, 1, 2].map(|a| (parent[a] - extents[a]) / 2), extents })
}

/// Places `prob` back into a zero volume of `full_extents` at `window`.
///
/// Voxels outside the window are exactly `0.0`, i.e. classified negative.
pub fn pad_to_full(prob: &Volume, window: &CropWindow, full_extents: [usize; 3]) -> Result<Volume, VolumeError> {
    if window.extents != prob.extents() || !window.fits(full_extents) {
        return Err(VolumeError::WindowMismatch { window: *window, volume: prob.extents(), full: full_extents });
    }
    let mut out = Volume::filled(full_extents, prob.spacing(), 0.0)?;
    let [cx, cy, cz] = window.extents;
    for z in 0..cz {
        for y in 0..cy {
            let dst = linear_index(full_extents, [window.offset[0], window.offset[1] + y, window.offset[2] + z]);
            let src = linear_index(window.extents, [0, y, z]);
            out.data[dst..dst + cx].copy_from_slice(&prob.data[src..src + cx]);
        }
    }
    Ok(out)
}

/// Settings for random sub-volume extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub patch_extents: [usize; 3],
    /// Probability that a patch is forced to contain a lesion voxel.
    pub lesion_centered_fraction: f64,
}

/// Draws a random patch from an image and its mask with the same window.
///
/// With probability `lesion_centered_fraction`, and when the mask is not
/// empty, a foreground voxel is drawn uniformly and the corner is drawn
/// uniformly among valid corners whose patch contains it. Otherwise the corner
/// is uniform over all valid positions.
pub fn sample_subvolume<R: Rng + ?Sized>(
    v: &Volume,
    m: &Mask,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<(Volume, Mask, CropWindow), VolumeError> {
    let extents = v.extents();
    if m.extents() != extents || m.spacing() != v.spacing() {
        return Err(VolumeError::ExtentMismatch { image: extents, mask: m.extents() });
    }
    if !(0.0..=1.0).contains(&cfg.lesion_centered_fraction) {
        return Err(VolumeError::BadFraction(cfg.lesion_centered_fraction));
    }
    let patch = cfg.patch_extents;
    if patch.contains(&0) || (0..3).any(|a| patch[a] > extents[a]) {
        return Err(VolumeError::PatchTooLarge { patch, extents });
    }
    let window = draw_window(m, patch, cfg.lesion_centered_fraction, rng);
    Ok((v.crop(&window)?, m.crop(&window)?, window))
}

fn uniform_inclusive<R: Rng + ?Sized>(rng: &mut R, lo: usize, hi: usize) -> usize {
    // u64 ranges keep the stream identical across pointer widths.
    rng.gen_range(lo as u64..=hi as u64) as usize
}

fn draw_window<R: Rng + ?Sized>(m: &Mask, patch: [usize; 3], lesion_fraction: f64, rng: &mut R) -> CropWindow {
    let extents = m.extents();
    let centered = lesion_fraction > 0.0 && rng.gen_bool(lesion_fraction);
    let count = if centered { m.count() } else { 0 };
    let offset = if count > 0 {
        let k = uniform_inclusive(rng, 0, count - 1);
        let p = m.foreground().nth(k).expect("k < count");
        [0, 1, 2].map(|a| {
            let lo = (p[a] + 1).saturating_sub(patch[a]);
            let hi = p[a].min(extents[a] - patch[a]);
            uniform_inclusive(rng, lo, hi)
        })
    } else {
        [0, 1, 2].map(|a| uniform_inclusive(rng, 0, extents[a] - patch[a]))
    };
    CropWindow { offset, extents: patch }
}

/// Per-volume z-score normalization with population standard deviation.
///
/// A constant volume maps to all zeros.
pub fn normalize_zscore(v: &Volume) -> Volume {
    let n = v.len() as f64;
    let mean = v.data.iter().sum::<f64>() / n;
    let var = v.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = num_traits::Float::sqrt(var);
    let data = if std > 0.0 && std.is_finite() {
        v.data.iter().map(|x| (x - mean) / std).collect()
    } else {
        vec![0.0; v.len()]
    };
    Volume { extents: v.extents, spacing: v.spacing, data }
}

/// Thresholds a probability volume; ties (`prob == threshold`) are foreground.
pub fn binarize(prob: &Volume, threshold: f64) -> Mask {
    Mask {
        extents: prob.extents,
        spacing_bits: prob.spacing.map(f64::to_bits),
        data: prob.data.iter().map(|&p| (p >= threshold) as u8).collect(),
    }
}
