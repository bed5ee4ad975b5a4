//! The 3D residual U-Net.
//!
//! Layout, top to bottom:
//!
//! * level 0 encoder: 3×3×3 stem conv, then `encoder_blocks[0]` residual blocks;
//! * each lower level `l`: a stride-2 3×3×3 down-sampling conv that widens
//!   the features to `c_l`, then `encoder_blocks[l]` residual blocks (the
//!   deepest level uses `bottleneck_blocks`);
//! * decoder level `l`: trilinear ×2 upsampling followed by a 1×1×1 conv to
//!   `c_l`, concatenation with the encoder features of that level, then
//!   `decoder_blocks[l]` residual blocks at `2·c_l` channels;
//! * head: group norm, relu and a 1×1×1 conv to one logit channel.
//!
//! Residual blocks are pre-activation: `gn → relu → conv → gn → relu → conv`
//! plus an identity skip, or a 1×1×1 projection when widths differ.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error("model expects {expected} input channel(s), got {got}")]
    InputChannels { expected: usize, got: usize },
    #[error("parameter set does not match the architecture: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub preset_name: String,
    /// Resolution scales including the bottleneck; level 0 is full resolution.
    pub levels: usize,
    pub base_channels: usize,
    pub channel_multiplier: usize,
    /// Residual blocks per encoder level `0..levels-1`.
    pub encoder_blocks: Vec<usize>,
    /// Residual blocks per decoder level `0..levels-1`.
    pub decoder_blocks: Vec<usize>,
    pub bottleneck_blocks: usize,
    /// Group norm uses `min(max_groups, channels)` groups.
    pub max_groups: usize,
    pub gn_eps: f64,
}

impl ArchConfig {
    /// The 52-convolution network: widths 16/32/64/128/256, five of its
    /// convolutions at full resolution.
    pub fn resunet52() -> Self {
        Self {
            preset_name: "resunet52".into(),
            levels: 5,
            base_channels: 16,
            channel_multiplier: 2,
            encoder_blocks: vec![1, 3, 3, 3],
            decoder_blocks: vec![0, 3, 3, 3],
            bottleneck_blocks: 2,
            max_groups: 8,
            gn_eps: 1e-5,
        }
    }

    /// Two-level, eight-channel network for desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            preset_name: "tiny".into(),
            levels: 2,
            base_channels: 8,
            channel_multiplier: 2,
            encoder_blocks: vec![1],
            decoder_blocks: vec![1],
            bottleneck_blocks: 1,
            max_groups: 8,
            gn_eps: 1e-5,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "resunet52" => Some(Self::resunet52()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multiplier.pow(level as u32)
    }

    pub fn groups_for(&self, channels: usize) -> usize {
        self.max_groups.min(channels)
    }

    /// Spatial extents must be multiples of this before the forward pass.
    pub fn required_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Extents after rounding each axis up to [`Self::required_multiple`].
    pub fn padded_extents(&self, spatial: [usize; 3]) -> [usize; 3] {
        let m = self.required_multiple();
        spatial.map(|e| e.div_ceil(m) * m)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.levels < 2 {
            return bad(format!("levels must be at least 2, got {}", self.levels));
        }
        if self.base_channels == 0 || self.channel_multiplier == 0 || self.max_groups == 0 {
            return bad("channel counts and groups must be positive".into());
        }
        if self.encoder_blocks.len() != self.levels - 1 || self.decoder_blocks.len() != self.encoder_blocks.len() {
            return bad(format!(
                "expected {} encoder and decoder entries, got {} and {}",
                self.levels - 1,
                self.encoder_blocks.len(),
                self.decoder_blocks.len()
            ));
        }
        if !(self.gn_eps > 0.0) {
            return bad("gn_eps must be positive".into());
        }
        for l in 0..self.levels {
            for c in [self.channels(l), 2 * self.channels(l)] {
                if c % self.groups_for(c) != 0 {
                    return bad(format!("{c} channels are not divisible by {} groups", self.groups_for(c)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
    level: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

/// Widths of one residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ResBlock {
    norm1: Norm,
    conv1: ConvLayer,
    norm2: Norm,
    conv2: ConvLayer,
    proj: Option<ConvLayer>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    stem: ConvLayer,
    /// Blocks for encoder levels `0..levels-1`, then the bottleneck.
    encoder: Vec<Vec<ResBlock>>,
    /// Down-sampling convs into levels `1..levels`.
    down: Vec<ConvLayer>,
    /// Up-sampling convs into levels `0..levels-1`.
    up: Vec<ConvLayer>,
    decoder: Vec<Vec<ResBlock>>,
    head_norm: Norm,
    head: ConvLayer,
    convs: Vec<ConvLayer>,
}

struct Builder<'a, T: Real> {
    cfg: &'a ArchConfig,
    rng: ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    convs: Vec<ConvLayer>,
}

impl<T: Real> Builder<'_, T> {
    fn param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(value);
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, level: usize) -> ConvLayer {
        let fan_in = (c_in * k * k * k) as f64;
        let std = num_traits::Float::sqrt(2.0 / fan_in);
        let shape: Shape = [c_out, c_in, k, k, k];
        let data = (0..c_out * c_in * k * k * k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        let weight = self.param(format!("{name}.weight"), Tensor::from_vec(shape, data).expect("shape"));
        let bias = self.param(format!("{name}.bias"), Tensor::zeros([c_out, 1, 1, 1, 1]));
        let layer = ConvLayer { weight, bias, stride, pad: k / 2, level };
        self.convs.push(layer);
        layer
    }

    fn norm(&mut self, name: &str, channels: usize) -> Norm {
        let gamma = self.param(format!("{name}.gamma"), Tensor::full([channels, 1, 1, 1, 1], T::one()));
        let beta = self.param(format!("{name}.beta"), Tensor::zeros([channels, 1, 1, 1, 1]));
        Norm { gamma, beta, groups: self.cfg.groups_for(channels) }
    }

    fn block(&mut self, name: &str, spec: ResBlockSpec, level: usize) -> ResBlock {
        let ResBlockSpec { in_channels: ci, out_channels: co } = spec;
        let norm1 = self.norm(&format!("{name}.gn1"), ci);
        let conv1 = self.conv(&format!("{name}.conv1"), ci, co, 3, 1, level);
        let norm2 = self.norm(&format!("{name}.gn2"), co);
        let conv2 = self.conv(&format!("{name}.conv2"), co, co, 3, 1, level);
        let proj = (ci != co).then(|| self.conv(&format!("{name}.proj"), ci, co, 1, 1, level));
        ResBlock { norm1, conv1, norm2, conv2, proj }
    }
}

/// A residual U-Net with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real> {
    config: ArchConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

/// Builds a model with He-normal conv weights, zero biases and betas, and
/// unit gammas, all drawn deterministically from `seed`.
pub fn build_model<T: Real>(cfg: &ArchConfig, seed: u64) -> Result<Model<T>, ModelError> {
    cfg.validate()?;
    let mut b = Builder::<T> {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(seed),
        names: Vec::new(),
        params: Vec::new(),
        convs: Vec::new(),
    };
    let last = cfg.levels - 1;
    let stem = b.conv("stem", 1, cfg.channels(0), 3, 1, 0);
    let mut encoder = Vec::new();
    let mut down = Vec::new();
    for l in 0..cfg.levels {
        let c = cfg.channels(l);
        if l > 0 {
            down.push(b.conv(&format!("down{l}"), cfg.channels(l - 1), c, 3, 2, l));
        }
        let count = if l == last { cfg.bottleneck_blocks } else { cfg.encoder_blocks[l] };
        let prefix = if l == last { String::from("bottleneck") } else { format!("enc{l}") };
        let spec = ResBlockSpec { in_channels: c, out_channels: c };
        encoder.push((0..count).map(|i| b.block(&format!("{prefix}.block{i}"), spec, l)).collect());
    }
    let mut up = vec![None; last];
    let mut decoder = vec![Vec::new(); last];
    for l in (0..last).rev() {
        let incoming = if l + 1 == last { cfg.channels(last) } else { 2 * cfg.channels(l + 1) };
        up[l] = Some(b.conv(&format!("up{l}"), incoming, cfg.channels(l), 1, 1, l));
        let w = 2 * cfg.channels(l);
        let spec = ResBlockSpec { in_channels: w, out_channels: w };
        decoder[l] = (0..cfg.decoder_blocks[l]).map(|i| b.block(&format!("dec{l}.block{i}"), spec, l)).collect();
    }
    let head_norm = b.norm("head.gn", 2 * cfg.channels(0));
    let head = b.conv("head", 2 * cfg.channels(0), 1, 1, 1, 0);
    let layout = Layout {
        stem,
        encoder,
        down,
        up: up.into_iter().map(|u| u.expect("filled")).collect(),
        decoder,
        head_norm,
        head,
        convs: b.convs,
    };
    Ok(Model { config: cfg.clone(), names: b.names, params: b.params, layout })
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    /// Parameter names in creation order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Replaces all parameters; names and shapes must match exactly.
    pub fn set_params(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<(), ModelError> {
        if named.len() != self.params.len() {
            return Err(ModelError::ParamMismatch(format!("expected {} tensors, got {}", self.params.len(), named.len())));
        }
        for ((name, t), (own, cur)) in named.iter().zip(self.names.iter().zip(&self.params)) {
            if name != own || t.shape() != cur.shape() {
                return Err(ModelError::ParamMismatch(format!("{name} {:?} vs {own} {:?}", t.shape(), cur.shape())));
            }
        }
        self.params = named.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }

    /// Same architecture with another parameter set, e.g. a snapshot.
    pub fn with_params(&self, named: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        let mut m = self.clone();
        m.set_params(named)?;
        Ok(m)
    }

    /// Records every parameter on `tape` as a leaf, in creation order.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect()
    }

    /// Number of learned convolutions, optionally restricted to one level.
    ///
    /// Strided down-convs and up-path convs count at their output level.
    pub fn count_conv_layers(&self, at_level: Option<usize>) -> usize {
        self.layout.convs.iter().filter(|c| at_level.is_none_or(|l| c.level == l)).count()
    }

    /// Logits with the input's spatial extents.
    ///
    /// Inputs whose extents are not multiples of
    /// [`ArchConfig::required_multiple`] are zero-padded symmetrically and the
    /// output is cropped back.
    pub fn forward(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var, ModelError> {
        if params.len() != self.params.len() {
            return Err(ModelError::ParamMismatch(format!("{} bound parameters", params.len())));
        }
        let shape = tape.shape(x);
        if shape[1] != 1 {
            return Err(ModelError::InputChannels { expected: 1, got: shape[1] });
        }
        let spatial = [shape[2], shape[3], shape[4]];
        let padded = self.config.padded_extents(spatial);
        let before = [0, 1, 2].map(|a| (padded[a] - spatial[a]) / 2);
        let after = [0, 1, 2].map(|a| padded[a] - spatial[a] - before[a]);
        let input = if padded == spatial { x } else { tape.pad_spatial(x, before, after)? };

        let lay = &self.layout;
        let eps = self.config.gn_eps;
        let mut h = run_conv(tape, params, &lay.stem, input)?;
        let mut skips = Vec::with_capacity(self.config.levels - 1);
        for (l, blocks) in lay.encoder.iter().enumerate() {
            if l > 0 {
                skips.push(h);
                h = run_conv(tape, params, &lay.down[l - 1], h)?;
            }
            for b in blocks {
                h = run_block(tape, params, b, eps, h)?;
            }
        }
        for l in (0..self.config.levels - 1).rev() {
            h = tape.upsample_trilinear(h)?;
            h = run_conv(tape, params, &lay.up[l], h)?;
            h = tape.concat_channels(skips[l], h)?;
            for b in &lay.decoder[l] {
                h = run_block(tape, params, b, eps, h)?;
            }
        }
        h = run_norm(tape, params, &lay.head_norm, eps, h)?;
        h = tape.relu(h)?;
        let logits = run_conv(tape, params, &lay.head, h)?;
        Ok(if padded == spatial { logits } else { tape.crop_spatial(logits, before, spatial)? })
    }

    /// Forward pass without gradient tracking.
    pub fn predict_logits(&self, x: Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let input = tape.leaf(x, false);
        let out = self.forward(&mut tape, &params, input)?;
        Ok(tape.take_value(out))
    }
}

fn run_conv<T: Real>(tape: &mut Tape<T>, p: &[Var], c: &ConvLayer, x: Var) -> Result<Var, ModelError> {
    Ok(tape.conv3d(x, p[c.weight], p[c.bias], c.stride, c.pad)?)
}

fn run_norm<T: Real>(tape: &mut Tape<T>, p: &[Var], n: &Norm, eps: f64, x: Var) -> Result<Var, ModelError> {
    Ok(tape.group_norm(x, n.groups, p[n.gamma], p[n.beta], eps)?)
}

fn run_block<T: Real>(tape: &mut Tape<T>, p: &[Var], b: &ResBlock, eps: f64, x: Var) -> Result<Var, ModelError> {
    let mut h = run_norm(tape, p, &b.norm1, eps, x)?;
    h = tape.relu(h)?;
    h = run_conv(tape, p, &b.conv1, h)?;
    h = run_norm(tape, p, &b.norm2, eps, h)?;
    h = tape.relu(h)?;
    h = run_conv(tape, p, &b.conv2, h)?;
    let skip = match &b.proj {
        Some(proj) => run_conv(tape, p, proj, x)?,
        None => x,
    };
    Ok(tape.add(h, skip)?)
}

/// A standalone residual block, exposed for testing block-level behaviour.
pub struct ResidualBlock<T: Real> {
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    block: ResBlock,
    eps: f64,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new(spec: ResBlockSpec, max_groups: usize, seed: u64) -> Self {
        let cfg = ArchConfig { max_groups, ..ArchConfig::tiny() };
        let mut b = Builder::<T> {
            cfg: &cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            names: Vec::new(),
            params: Vec::new(),
            convs: Vec::new(),
        };
        let block = b.block("block", spec, 0);
        Self { names: b.names, params: b.params, block, eps: cfg.gn_eps }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, ModelError> {
        let p: Vec<Var> = self.params.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        run_block(tape, &p, &self.block, self.eps, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resunet52_counts() {
        let m = build_model::<f32>(&ArchConfig::resunet52(), 0).unwrap();
        assert_eq!(m.count_conv_layers(None), 52);
        assert_eq!(m.count_conv_layers(Some(0)), 5);
        let per_level: Vec<usize> = (0..5).map(|l| m.count_conv_layers(Some(l))).collect();
        assert_eq!(per_level, [5, 14, 14, 14, 5]);
    }

    #[test]
    fn tiny_counts() {
        let m = build_model::<f32>(&ArchConfig::tiny(), 0).unwrap();
        assert_eq!(m.count_conv_layers(None), 10);
        assert_eq!(m.count_conv_layers(Some(0)), 7);
        assert_eq!(m.count_conv_layers(Some(1)), 3);
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model::<f32>(&ArchConfig::tiny(), 9).unwrap();
        let b = build_model::<f32>(&ArchConfig::tiny(), 9).unwrap();
        let c = build_model::<f32>(&ArchConfig::tiny(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn tiny_shape_contract() {
        let m = build_model::<f32>(&ArchConfig::tiny(), 1).unwrap();
        let out = m.predict_logits(Tensor::full([1, 1, 16, 16, 16], 0.3)).unwrap();
        assert_eq!(out.shape(), [1, 1, 16, 16, 16]);
        let odd = m.predict_logits(Tensor::full([2, 1, 5, 8, 7], 0.3)).unwrap();
        assert_eq!(odd.shape(), [2, 1, 5, 8, 7]);
    }

    #[test]
    fn paper_crop_is_padded_to_multiple_of_sixteen() {
        let cfg = ArchConfig::resunet52();
        assert_eq!(cfg.required_multiple(), 16);
        assert_eq!(cfg.padded_extents([144, 172, 168]), [144, 176, 176]);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = ArchConfig::tiny();
        cfg.levels = 1;
        assert!(matches!(build_model::<f32>(&cfg, 0), Err(ModelError::InvalidConfig(_))));
        let mut cfg = ArchConfig::tiny();
        cfg.decoder_blocks = vec![1, 1];
        assert!(build_model::<f32>(&cfg, 0).is_err());
        let mut cfg = ArchConfig::tiny();
        cfg.base_channels = 12;
        assert!(build_model::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn zeroed_block_is_identity() {
        for spec in [ResBlockSpec { in_channels: 8, out_channels: 8 }] {
            let mut block = ResidualBlock::<f64>::new(spec, 8, 3);
            for (name, p) in block.names().to_vec().iter().zip(block.params_mut()) {
                if name.contains("conv") {
                    p.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
                if name.ends_with("gamma") {
                    p.data_mut().iter_mut().for_each(|v| *v = 2.5);
                }
            }
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec([1, 8, 3, 3, 3], (0..216).map(|i| (i as f64).sin()).collect()).unwrap(), false);
            let y = block.forward(&mut tape, x).unwrap();
            assert_eq!(tape.value(y), tape.value(x));
        }
    }

    #[test]
    fn projection_block_changes_width() {
        let block = ResidualBlock::<f64>::new(ResBlockSpec { in_channels: 8, out_channels: 16 }, 8, 3);
        assert!(block.names().iter().any(|n| n == "block.proj.weight"));
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([1, 8, 2, 2, 2], 0.5), false);
        let y = block.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), [1, 16, 2, 2, 2]);
    }

    #[test]
    fn set_params_validates() {
        let mut m = build_model::<f32>(&ArchConfig::tiny(), 0).unwrap();
        let mut named: Vec<_> = m.named_params().map(|(n, t)| (String::from(n), t.clone())).collect();
        assert!(m.set_params(named.clone()).is_ok());
        named[0].0 = "other".into();
        assert!(matches!(m.set_params(named), Err(ModelError::ParamMismatch(_))));
    }
}
