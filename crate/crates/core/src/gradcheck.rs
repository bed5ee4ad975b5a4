//! Central finite-difference checks of every differentiable operator.
//!
//! Each case builds a small random problem in `f64`, reduces the operator's
//! output to a scalar with fixed random weights, and compares the tape's
//! gradient against `(f(x + h) - f(x - h)) / 2h` for every input element.
//! The error of one element is `|analytic - numeric| / max(1, |numeric|)`.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Result as AdResult, Tape, Var};
use crate::loss::{bce_loss, combined_loss, soft_dice_loss, LossConfig};
use crate::resunet::{ResBlockSpec, ResidualBlock};
use crate::tensor::{numel, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { step: 1e-4, tolerance: 1e-4 }
    }
}

/// Outcome of one case under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub case: String,
    pub seed: u64,
    pub elements: usize,
    pub max_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradcheckError {
    #[error("unknown gradcheck case `{0}`")]
    UnknownCase(String),
    #[error("case {case} failed to evaluate: {detail}")]
    Evaluation { case: String, detail: String },
}

/// Seeds used by the default suite.
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> AdResult<Var>>;

/// A differentiable function of some input tensors.
struct Case {
    inputs: Vec<Tensor<f64>>,
    differentiable: Vec<bool>,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..numel(&shape)).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Values in `±[0.1, 1]`, far from relu's kink relative to the step size.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let data = (0..numel(&shape))
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

fn binary(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let data = (0..numel(&shape)).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

fn conv_case(rng: &mut ChaCha8Rng, spatial: [usize; 3], k: usize, stride: usize, pad: usize) -> Case {
    let (ci, co) = (2, 3);
    Case {
        inputs: alloc::vec![
            uniform(rng, [2, ci, spatial[0], spatial[1], spatial[2]], -1.0, 1.0),
            uniform(rng, [co, ci, k, k, k], -0.5, 0.5),
            uniform(rng, [co, 1, 1, 1, 1], -0.5, 0.5),
        ],
        differentiable: alloc::vec![true; 3],
        build: Box::new(move |t, v| t.conv3d(v[0], v[1], v[2], stride, pad)),
    }
}

fn loss_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let shape = [2, 1, 3, 2, 3];
    alloc::vec![uniform(rng, shape, 0.05, 0.95), binary(rng, shape)]
}

/// Names accepted by [`run_case`].
pub const CASES: [&str; 19] = [
    "conv3d_k3_s1_p1",
    "conv3d_k3_s2_p1",
    "conv3d_k3_s1_p0",
    "conv3d_k3_s2_p0",
    "conv3d_k1_s1_p0",
    "conv3d_k2_s2_p0",
    "group_norm",
    "relu",
    "sigmoid",
    "add",
    "scale",
    "upsample_trilinear",
    "concat_channels",
    "pad_crop_spatial",
    "bce_loss",
    "soft_dice_loss",
    "soft_dice_loss_squared",
    "combined_loss",
    "residual_block",
];

fn make_case(name: &str, rng: &mut ChaCha8Rng) -> Option<Case> {
    let s = [2, 1, 3, 4, 5];
    let case = match name {
        "conv3d_k3_s1_p1" => conv_case(rng, [4, 3, 5], 3, 1, 1),
        "conv3d_k3_s2_p1" => conv_case(rng, [5, 4, 6], 3, 2, 1),
        "conv3d_k3_s1_p0" => conv_case(rng, [4, 3, 5], 3, 1, 0),
        "conv3d_k3_s2_p0" => conv_case(rng, [5, 5, 6], 3, 2, 0),
        "conv3d_k1_s1_p0" => conv_case(rng, [3, 4, 2], 1, 1, 0),
        "conv3d_k2_s2_p0" => conv_case(rng, [4, 5, 4], 2, 2, 0),
        "group_norm" => Case {
            inputs: alloc::vec![
                uniform(rng, [2, 4, 2, 3, 2], -2.0, 2.0),
                uniform(rng, [4, 1, 1, 1, 1], 0.5, 1.5),
                uniform(rng, [4, 1, 1, 1, 1], -0.5, 0.5),
            ],
            differentiable: alloc::vec![true; 3],
            build: Box::new(|t, v| t.group_norm(v[0], 2, v[1], v[2], 1e-5)),
        },
        "relu" => Case {
            inputs: alloc::vec![away_from_zero(rng, s)],
            differentiable: alloc::vec![true],
            build: Box::new(|t, v| t.relu(v[0])),
        },
        "sigmoid" => Case {
            inputs: alloc::vec![uniform(rng, s, -4.0, 4.0)],
            differentiable: alloc::vec![true],
            build: Box::new(|t, v| t.sigmoid(v[0])),
        },
        "add" => Case {
            inputs: alloc::vec![uniform(rng, s, -1.0, 1.0), uniform(rng, s, -1.0, 1.0)],
            differentiable: alloc::vec![true, true],
            build: Box::new(|t, v| t.add(v[0], v[1])),
        },
        "scale" => Case {
            inputs: alloc::vec![uniform(rng, s, -1.0, 1.0)],
            differentiable: alloc::vec![true],
            build: Box::new(|t, v| t.scale(v[0], -0.7)),
        },
        "upsample_trilinear" => Case {
            inputs: alloc::vec![uniform(rng, [2, 2, 3, 2, 4], -1.0, 1.0)],
            differentiable: alloc::vec![true],
            build: Box::new(|t, v| t.upsample_trilinear(v[0])),
        },
        "concat_channels" => Case {
            inputs: alloc::vec![uniform(rng, [2, 2, 2, 3, 2], -1.0, 1.0), uniform(rng, [2, 1, 2, 3, 2], -1.0, 1.0)],
            differentiable: alloc::vec![true, true],
            build: Box::new(|t, v| t.concat_channels(v[0], v[1])),
        },
        "pad_crop_spatial" => Case {
            inputs: alloc::vec![uniform(rng, [1, 2, 3, 4, 3], -1.0, 1.0)],
            differentiable: alloc::vec![true],
            build: Box::new(|t, v| {
                let p = t.pad_spatial(v[0], [1, 0, 2], [0, 2, 1])?;
                t.crop_spatial(p, [0, 1, 1], [3, 4, 4])
            }),
        },
        "bce_loss" => Case {
            inputs: loss_inputs(rng),
            differentiable: alloc::vec![true, false],
            build: Box::new(|t, v| bce_loss(t, v[0], v[1], 1e-7)),
        },
        "soft_dice_loss" => Case {
            inputs: loss_inputs(rng),
            differentiable: alloc::vec![true, false],
            build: Box::new(|t, v| soft_dice_loss(t, v[0], v[1], 1e-5, false)),
        },
        "soft_dice_loss_squared" => Case {
            inputs: loss_inputs(rng),
            differentiable: alloc::vec![true, false],
            build: Box::new(|t, v| soft_dice_loss(t, v[0], v[1], 1e-5, true)),
        },
        "combined_loss" => Case {
            inputs: loss_inputs(rng),
            differentiable: alloc::vec![true, false],
            build: Box::new(|t, v| combined_loss(t, v[0], v[1], &LossConfig { alpha: 0.3, ..LossConfig::default() })),
        },
        "residual_block" => {
            let block = ResidualBlock::<f64>::new(ResBlockSpec { in_channels: 2, out_channels: 4 }, 2, rng.gen());
            Case {
                inputs: alloc::vec![uniform(rng, [1, 2, 3, 3, 2], -1.0, 1.0)],
                differentiable: alloc::vec![true],
                build: Box::new(move |t, v| block.forward(t, v[0]).map_err(|e| match e {
                    crate::resunet::ModelError::Autodiff(a) => a,
                    other => crate::autodiff::AutodiffError::InvalidArgument { op: "residual_block", detail: alloc::format!("{other}") },
                })),
            }
        }
        _ => return None,
    };
    Some(case)
}

/// Scalar objective: the case output contracted with fixed weights.
fn objective(case: &Case, weights: &mut Option<Vec<f64>>, rng: &mut ChaCha8Rng, tape: &mut Tape<f64>, vars: &[Var]) -> AdResult<Var> {
    let out = (case.build)(tape, vars)?;
    let n = tape.value(out).numel();
    if n == 1 {
        return Ok(out);
    }
    let w = weights.get_or_insert_with(|| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    tape.weighted_sum(out, w)
}

/// Checks one named case under one seed.
pub fn run_case(name: &str, seed: u64, cfg: &GradcheckConfig) -> Result<CheckResult, GradcheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = make_case(name, &mut rng).ok_or_else(|| GradcheckError::UnknownCase(name.into()))?;
    let fail = |e: crate::autodiff::AutodiffError| GradcheckError::Evaluation { case: name.into(), detail: alloc::format!("{e}") };
    let mut weights = None;

    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().zip(&case.differentiable).map(|(x, &g)| tape.leaf(x.clone(), g)).collect();
    let l = objective(&case, &mut weights, &mut rng, &mut tape, &vars).map_err(fail)?;
    tape.backward(l).map_err(fail)?;
    let analytic: Vec<Option<Vec<f64>>> = vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect();

    let mut eval = |inputs: &[Tensor<f64>]| -> Result<f64, GradcheckError> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = objective(&case, &mut weights, &mut rng, &mut t, &vs).map_err(fail)?;
        Ok(t.value(l).data()[0])
    };

    let mut inputs = case.inputs.clone();
    let mut max_error = 0.0f64;
    let mut elements = 0;
    for (i, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + cfg.step;
            let up = eval(&inputs)?;
            inputs[i].data_mut()[j] = orig - cfg.step;
            let down = eval(&inputs)?;
            inputs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let err = (grad[j] - numeric).abs() / numeric.abs().max(1.0);
            max_error = max_error.max(err);
            elements += 1;
        }
    }
    Ok(CheckResult { case: name.into(), seed, elements, max_error, passed: elements > 0 && max_error < cfg.tolerance })
}

/// Runs `cases` (all when `None`) under every seed.
pub fn run_suite(cases: Option<&[&str]>, seeds: &[u64], cfg: &GradcheckConfig) -> Result<Vec<CheckResult>, GradcheckError> {
    let names = cases.unwrap_or(&CASES);
    let mut out = Vec::with_capacity(names.len() * seeds.len());
    for name in names {
        for &seed in seeds {
            out.push(run_case(name, seed, cfg)?);
        }
    }
    Ok(out)
}
