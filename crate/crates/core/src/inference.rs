//! Whole-scan prediction: one center crop through the network, zeros outside.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::resunet::{Model, ModelError};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::volume::{center_crop, normalize_zscore, pad_to_full, Volume, VolumeError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InferenceError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("an ensemble needs at least one model")]
    NoModels,
    #[error("ensemble members have different architectures or parameter layouts")]
    ArchMismatch,
}

type Result<T> = core::result::Result<T, InferenceError>;

/// How ensemble members are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Mean of per-member probabilities.
    #[default]
    Probability,
    /// Sigmoid of the mean logit.
    Logit,
}

/// Logits on the crop window and the window itself.
fn crop_logits<T: Real>(model: &Model<T>, scan: &Volume, crop: [usize; 3], normalize: bool) -> Result<(Vec<f64>, crate::volume::CropWindow)> {
    let prepared = if normalize { normalize_zscore(scan) } else { scan.clone() };
    let (cropped, window) = center_crop(&prepared, crop)?;
    let x = Tensor::<f64>::from_volume(&cropped).cast::<T>();
    let logits = model.predict_logits(x)?;
    Ok((logits.data().iter().map(|v| v.widen()).collect(), window))
}

fn assemble(scan: &Volume, window: &crate::volume::CropWindow, probs: Vec<f64>) -> Result<Volume> {
    let inner = Volume::new(window.extents, scan.spacing(), probs)?;
    Ok(pad_to_full(&inner, window, scan.extents())?)
}

/// Probability map with the scan's extents. `normalize` applies the
/// per-volume z-score used in training.
pub fn predict_volume<T: Real>(model: &Model<T>, scan: &Volume, crop_extents: [usize; 3], normalize: bool) -> Result<Volume> {
    let (logits, window) = crop_logits(model, scan, crop_extents, normalize)?;
    assemble(scan, &window, logits.into_iter().map(sigmoid).collect())
}

/// Combines several models of one architecture, e.g. training snapshots.
pub fn ensemble_predict<T: Real>(
    models: &[Model<T>],
    scan: &Volume,
    crop_extents: [usize; 3],
    normalize: bool,
    mode: EnsembleMode,
) -> Result<Volume> {
    let first = models.first().ok_or(InferenceError::NoModels)?;
    let same = |m: &Model<T>| {
        m.config() == first.config()
            && m.names() == first.names()
            && m.params().iter().zip(first.params()).all(|(a, b)| a.shape() == b.shape())
    };
    if !models.iter().all(same) {
        return Err(InferenceError::ArchMismatch);
    }
    let mut acc: Vec<f64> = Vec::new();
    let mut window = None;
    for m in models {
        let (logits, w) = crop_logits(m, scan, crop_extents, normalize)?;
        let vals = logits.into_iter().map(|z| match mode {
            EnsembleMode::Probability => sigmoid(z),
            EnsembleMode::Logit => z,
        });
        if acc.is_empty() {
            acc = vals.collect();
        } else {
            acc.iter_mut().zip(vals).for_each(|(a, v)| *a += v);
        }
        window = Some(w);
    }
    let k = models.len() as f64;
    let probs = acc
        .into_iter()
        .map(|s| match mode {
            EnsembleMode::Probability => s / k,
            EnsembleMode::Logit => sigmoid(s / k),
        })
        .collect();
    assemble(scan, &window.expect("at least one model"), probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resunet::{build_model, ArchConfig};
    use crate::volume::{binarize, center_window};
    use alloc::vec;

    fn scan() -> Volume {
        let e = [10, 9, 8];
        let data = (0..e.iter().product::<usize>()).map(|i| ((i * 37) % 11) as f64 / 5.0).collect();
        Volume::new(e, [1.0, 1.0, 2.0], data).unwrap()
    }

    fn model(seed: u64) -> Model<f64> {
        build_model(&ArchConfig::tiny(), seed).unwrap()
    }

    #[test]
    fn outside_window_is_zero_and_range_is_unit() {
        let s = scan();
        let crop = [6, 5, 4];
        let p = predict_volume(&model(1), &s, crop, true).unwrap();
        assert_eq!(p.extents(), s.extents());
        assert_eq!(p.spacing(), s.spacing());
        let w = center_window(s.extents(), crop).unwrap();
        for (i, &v) in p.data().iter().enumerate() {
            assert!((0.0..=1.0).contains(&v));
            if !w.contains(crate::volume::coords(s.extents(), i)) {
                assert_eq!(v, 0.0);
            }
        }
        let inside = p.crop(&w).unwrap();
        assert_eq!(binarize(&p, 0.5).count(), binarize(&inside, 0.5).count());
    }

    #[test]
    fn crop_must_fit() {
        let r = predict_volume(&model(1), &scan(), [11, 1, 1], true);
        assert!(matches!(r, Err(InferenceError::Volume(VolumeError::CropTooLarge { .. }))));
    }

    #[test]
    fn deterministic() {
        let s = scan();
        let a = predict_volume(&model(2), &s, [6, 6, 6], true).unwrap();
        assert_eq!(a, predict_volume(&model(2), &s, [6, 6, 6], true).unwrap());
    }

    #[test]
    fn ensemble_identities() {
        let s = scan();
        let crop = [8, 8, 8];
        let m = model(3);
        let single = predict_volume(&m, &s, crop, true).unwrap();
        let one = ensemble_predict(&[m.clone()], &s, crop, true, EnsembleMode::Probability).unwrap();
        assert_eq!(one, single);
        let two = ensemble_predict(&[m.clone(), m.clone()], &s, crop, true, EnsembleMode::Probability).unwrap();
        assert_eq!(two, single);
        let three = ensemble_predict(&vec![m.clone(); 3], &s, crop, true, EnsembleMode::Logit).unwrap();
        for (a, b) in three.data().iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_is_the_voxelwise_mean() {
        let s = scan();
        let crop = [8, 8, 8];
        let (a, b) = (model(4), model(5));
        let pa = predict_volume(&a, &s, crop, true).unwrap();
        let pb = predict_volume(&b, &s, crop, true).unwrap();
        let e = ensemble_predict(&[a, b], &s, crop, true, EnsembleMode::Probability).unwrap();
        for ((x, y), m) in pa.data().iter().zip(pb.data()).zip(e.data()) {
            assert!((m - (x + y) / 2.0).abs() < 1e-15);
            assert!(*m >= x.min(*y) && *m <= x.max(*y));
        }
    }

    #[test]
    fn ensemble_rejects_mixed_architectures() {
        let other = ArchConfig { base_channels: 4, ..ArchConfig::tiny() };
        let b = build_model::<f64>(&other, 1).unwrap();
        let r = ensemble_predict(&[model(1), b], &scan(), [8, 8, 8], true, EnsembleMode::Probability);
        assert_eq!(r, Err(InferenceError::ArchMismatch));
        let none: [Model<f64>; 0] = [];
        assert_eq!(ensemble_predict(&none, &scan(), [8, 8, 8], true, EnsembleMode::Probability), Err(InferenceError::NoModels));
    }
}
