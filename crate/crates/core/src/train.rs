//! Two-stage zoom-in&out training.
//!
//! An epoch draws one random patch from every training scan in a shuffled
//! order and groups the patches into mini-batches. The learning rate follows
//! the stage's warm-restart schedule, stepped once per epoch, and snapshots
//! are taken at the end of the listed epochs (1-based). The zoom-out stage
//! starts from the final parameters of the zoom-in stage with a fresh Adam
//! state.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape};
use crate::inference::{predict_volume, InferenceError};
use crate::loss::{combined_loss, LossConfig};
use crate::metrics::dsc;
use crate::optim::{adam_step, capture_snapshot, AdamConfig, AdamState, OptimError, SgdrSchedule, Snapshot};
use crate::resunet::{ArchConfig, Model, ModelError};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::volume::{binarize, normalize_zscore, sample_subvolume, Mask, SamplerConfig, Volume, VolumeError};

/// Name of the final model.
pub const SYSTEM_FINAL: &str = "3D-ResU-Net";
/// Name of the model before the zoom-out finetuning stage.
pub const SYSTEM_PRE_FINETUNE: &str = "3D-ResU-Net-F";
/// Name of the snapshot ensemble of the zoom-out stage.
pub const SYSTEM_ENSEMBLE: &str = "3D-ResU-Net-E";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("the training split is empty")]
    EmptyTrainSplit,
    #[error("the dev split is empty")]
    EmptyDevSplit,
    #[error("non-finite value in {op} at {stage:?} epoch {epoch}, batch {batch}")]
    NonFiniteLoss { stage: StageName, epoch: u64, batch: usize, op: &'static str },
    #[error("stages must run zoom-in then zoom-out with zoom-out patches at least as large")]
    StageOrderViolation,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

type Result<T> = core::result::Result<T, TrainError>;

/// One scan with its reference mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub image: Volume,
    pub mask: Mask,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    ZoomIn,
    ZoomOut,
}

impl StageName {
    fn stream(self) -> u64 {
        match self {
            StageName::ZoomIn => 0,
            StageName::ZoomOut => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: StageName,
    pub patch_extents: [usize; 3],
    pub epochs: u64,
    pub batch_size: usize,
    /// `eta_max` of the schedule is the stage's initial learning rate.
    pub schedule: SgdrSchedule,
    /// 1-based epochs whose end-of-epoch parameters are kept.
    pub snapshot_epochs: Vec<u64>,
    pub lesion_centered_fraction: f64,
    /// Dev evaluation period in epochs; 0 disables it.
    pub dev_every: u64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(TrainError::InvalidConfig(s.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patch_extents.contains(&0) {
            return bad("patch extents must be positive");
        }
        if !(0.0..=1.0).contains(&self.lesion_centered_fraction) {
            return bad("lesion_centered_fraction must lie in [0, 1]");
        }
        self.schedule.validate()?;
        Ok(())
    }
}

/// Everything that determines a training run besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub zoom_in: StageConfig,
    pub zoom_out: StageConfig,
    /// Center crop used for dev evaluation and prediction.
    pub inference_crop: [usize; 3],
    pub threshold: f64,
    /// Per-volume z-score before sampling and inference.
    pub normalize: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale settings: 128³ patches for 1200 epochs at 1e-3, then
    /// 144×172×168 for 150 epochs at 1e-4 with snapshots at 50, 100 and 150.
    pub fn paper() -> Self {
        Self {
            arch: ArchConfig::resunet52(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            zoom_in: StageConfig {
                name: StageName::ZoomIn,
                patch_extents: [128, 128, 128],
                epochs: 1200,
                batch_size: 2,
                schedule: SgdrSchedule { eta_max: 1e-3, eta_min: 0.0, t0: 300, t_mult: 1 },
                snapshot_epochs: vec![],
                lesion_centered_fraction: 0.5,
                dev_every: 50,
            },
            zoom_out: StageConfig {
                name: StageName::ZoomOut,
                patch_extents: [144, 172, 168],
                epochs: 150,
                batch_size: 2,
                schedule: SgdrSchedule { eta_max: 1e-4, eta_min: 0.0, t0: 50, t_mult: 1 },
                snapshot_epochs: vec![50, 100, 150],
                lesion_centered_fraction: 0.5,
                dev_every: 50,
            },
            inference_crop: [144, 172, 168],
            threshold: 0.5,
            normalize: true,
            seed: 1,
        }
    }

    /// CPU-sized run on 48³ synthetic scans with the tiny network.
    pub fn desk() -> Self {
        Self {
            arch: ArchConfig::tiny(),
            zoom_in: StageConfig {
                patch_extents: [16, 16, 16],
                epochs: 60,
                schedule: SgdrSchedule { eta_max: 3e-3, eta_min: 0.0, t0: 20, t_mult: 1 },
                dev_every: 10,
                ..Self::paper().zoom_in
            },
            zoom_out: StageConfig {
                patch_extents: [32, 32, 32],
                epochs: 20,
                schedule: SgdrSchedule { eta_max: 1e-3, eta_min: 0.0, t0: 5, t_mult: 1 },
                snapshot_epochs: vec![10, 15, 20],
                dev_every: 10,
                ..Self::paper().zoom_out
            },
            inference_crop: [32, 32, 32],
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.loss.validate().map_err(|e| TrainError::InvalidConfig(alloc::format!("{e}")))?;
        self.zoom_in.validate()?;
        self.zoom_out.validate()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(TrainError::InvalidConfig("threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: StageName,
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_dsc: Option<f64>,
}

/// Parameters with the best dev DSC seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BestDev<T> {
    pub stage: StageName,
    pub epoch: u64,
    pub dev_dsc: f64,
    pub parameters: Vec<(String, Tensor<T>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput<T: Real> {
    pub model: Model<T>,
    pub snapshots: Vec<Snapshot<T>>,
    pub history: Vec<EpochRecord>,
    pub best_dev: Option<BestDev<T>>,
}

/// Result of both stages, keyed by the system names used in reports.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutput<T: Real> {
    /// The finetuned model.
    pub final_model: Model<T>,
    /// The zoom-in model before finetuning.
    pub pre_finetune: Model<T>,
    /// Zoom-out snapshots for the ensemble.
    pub snapshots: Vec<Snapshot<T>>,
    pub history: Vec<EpochRecord>,
    pub best_dev: Option<BestDev<T>>,
}

impl<T: Real> TrainingOutput<T> {
    /// Snapshot parameters materialized as models.
    pub fn ensemble_members(&self) -> Result<Vec<Model<T>>> {
        self.snapshots.iter().map(|s| Ok(self.final_model.with_params(s.parameters.clone())?)).collect()
    }
}

/// Receives every epoch record as soon as it is final.
pub type Observer<'a> = &'a mut dyn FnMut(&EpochRecord);

fn named<T: Real>(model: &Model<T>) -> Vec<(String, Tensor<T>)> {
    model.named_params().map(|(n, t)| (String::from(n), t.clone())).collect()
}

fn normalized(samples: &[Sample], normalize: bool) -> Vec<Volume> {
    samples.iter().map(|s| if normalize { normalize_zscore(&s.image) } else { s.image.clone() }).collect()
}

fn as_batch<T: Real>(vols: &[Volume]) -> Tensor<T> {
    let items: Vec<Tensor<T>> = vols.iter().map(|v| Tensor::<f64>::from_volume(v).cast()).collect();
    Tensor::stack(&items).expect("patches share extents")
}

/// Mean DSC of thresholded whole-scan predictions over `samples`.
pub fn evaluate_dev<T: Real>(model: &Model<T>, samples: &[Sample], crop: [usize; 3], threshold: f64, normalize: bool) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDevSplit);
    }
    let mut total = 0.0;
    for s in samples {
        let prob = predict_volume(model, &s.image, crop, normalize)?;
        total += dsc(&binarize(&prob, threshold), &s.mask).expect("prediction shares the scan grid");
    }
    Ok(total / samples.len() as f64)
}

/// Runs one stage from `model`. Deterministic in `(data, stage, cfg, seed)`.
pub fn train_stage<T: Real>(
    mut model: Model<T>,
    data: &Dataset,
    stage: &StageConfig,
    cfg: &TrainConfig,
    seed: u64,
    observer: Observer<'_>,
) -> Result<StageOutput<T>> {
    stage.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let images = normalized(&data.train, cfg.normalize);
    let sampler = SamplerConfig { patch_extents: stage.patch_extents, lesion_centered_fraction: stage.lesion_centered_fraction };
    let mut adam = AdamState::new(model.params(), cfg.adam, stage.schedule.eta_max);
    let mut history = Vec::with_capacity(stage.epochs as usize);
    let mut snapshots = Vec::new();
    let mut best_dev: Option<BestDev<T>> = None;

    for epoch in 1..=stage.epochs {
        adam.lr = stage.schedule.lr_at(epoch - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((stage.name.stream() << 48) | epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (batch, chunk) in order.chunks(stage.batch_size).enumerate() {
            let mut xs = Vec::with_capacity(chunk.len());
            let mut ys = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (x, y, _) = sample_subvolume(&images[i], &data.train[i].mask, &sampler, &mut rng)?;
                xs.push(x);
                ys.push(y.to_volume());
            }
            let non_finite = |e: ModelError| match e {
                ModelError::Autodiff(AutodiffError::NonFinite { op }) => {
                    TrainError::NonFiniteLoss { stage: stage.name, epoch, batch, op }
                }
                other => TrainError::Model(other),
            };
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true);
            let x = tape.leaf(as_batch::<T>(&xs), false);
            let y = tape.leaf(as_batch::<T>(&ys), false);
            let logits = model.forward(&mut tape, &params, x).map_err(non_finite)?;
            let loss = (|| {
                let p = tape.sigmoid(logits)?;
                let l = combined_loss(&mut tape, p, y, &cfg.loss)?;
                tape.backward(l)?;
                Ok(l)
            })()
            .map_err(|e: AutodiffError| non_finite(e.into()))?;
            loss_sum += tape.value(loss).data()[0].widen() * chunk.len() as f64;
            let grads: Vec<&[T]> = params.iter().map(|&p| tape.grad(p).expect("parameters require grad")).collect();
            adam_step(model.params_mut(), &grads, &mut adam)?;
        }

        let dev_dsc = if stage.dev_every > 0 && epoch % stage.dev_every == 0 && !data.dev.is_empty() {
            let d = evaluate_dev(&model, &data.dev, cfg.inference_crop, cfg.threshold, cfg.normalize)?;
            if best_dev.as_ref().is_none_or(|b| d > b.dev_dsc) {
                best_dev = Some(BestDev { stage: stage.name, epoch, dev_dsc: d, parameters: named(&model) });
            }
            Some(d)
        } else {
            None
        };
        let rec = EpochRecord { stage: stage.name, epoch, lr: adam.lr, train_loss: loss_sum / data.train.len() as f64, dev_dsc };
        observer(&rec);
        history.push(rec);
        snapshots.extend(capture_snapshot(&model, epoch, &stage.snapshot_epochs));
    }
    Ok(StageOutput { model, snapshots, history, best_dev })
}

/// Checks that the stages run zoom-in then zoom-out with growing patches.
pub fn check_stage_order(first: &StageConfig, second: &StageConfig) -> Result<()> {
    let grows = (0..3).all(|a| second.patch_extents[a] >= first.patch_extents[a]);
    if first.name != StageName::ZoomIn || second.name != StageName::ZoomOut || !grows {
        return Err(TrainError::StageOrderViolation);
    }
    Ok(())
}

/// Zoom-in training followed by zoom-out finetuning of the same parameters.
pub fn run_zoom_in_out<T: Real>(model: Model<T>, data: &Dataset, cfg: &TrainConfig, observer: Observer<'_>) -> Result<TrainingOutput<T>> {
    cfg.validate()?;
    check_stage_order(&cfg.zoom_in, &cfg.zoom_out)?;
    let first = train_stage(model, data, &cfg.zoom_in, cfg, cfg.seed, observer)?;
    let pre_finetune = first.model.clone();
    let second = train_stage(first.model, data, &cfg.zoom_out, cfg, cfg.seed, observer)?;
    let mut history = first.history;
    history.extend(second.history);
    let best_dev = match (first.best_dev, second.best_dev) {
        (Some(a), Some(b)) => Some(if b.dev_dsc >= a.dev_dsc { b } else { a }),
        (a, b) => b.or(a),
    };
    Ok(TrainingOutput { final_model: second.model, pre_finetune, snapshots: second.snapshots, history, best_dev })
}
