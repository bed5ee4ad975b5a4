//! Training objective: an affine combination of binary cross entropy and
//! soft Dice loss over predicted probabilities.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{shape_err, AutodiffError, Backward, Result, Tape, Var};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Weights and numerical guards of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of BCE; Dice gets `1 - alpha`.
    pub alpha: f64,
    /// Added to numerator and denominator of the Dice ratio.
    pub smooth_eps: f64,
    /// Probabilities are clamped to `[clamp_eps, 1 - clamp_eps]` inside BCE.
    pub clamp_eps: f64,
    /// Use `Σp² + Σt²` in the Dice denominator instead of `Σp + Σt`.
    #[serde(default)]
    pub squared_dice: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.5, smooth_eps: 1e-5, clamp_eps: 1e-7, squared_dice: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: &str| Err(AutodiffError::InvalidArgument { op: "loss", detail: detail.into() });
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.smooth_eps > 0.0) || !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return bad("eps values must be positive");
        }
        Ok(())
    }
}

fn same_shape<T: Real>(tape: &Tape<T>, op: &'static str, p: Var, t: Var) -> Result<()> {
    if tape.shape(p) != tape.shape(t) {
        return Err(shape_err(op, alloc::format!("{:?} vs {:?}", tape.shape(p), tape.shape(t))));
    }
    Ok(())
}

fn scalar<T: Real>(v: f64) -> Tensor<T> {
    Tensor::full([1, 1, 1, 1, 1], T::from_f64_lossy(v))
}

/// Mean binary cross entropy with clamped probabilities.
pub fn bce_loss<T: Real>(tape: &mut Tape<T>, prob: Var, target: Var, clamp_eps: f64) -> Result<Var> {
    same_shape(tape, "bce_loss", prob, target)?;
    let (p, t) = (tape.value(prob).data(), tape.value(target).data());
    let (lo, hi) = (clamp_eps, 1.0 - clamp_eps);
    let total: f64 = p
        .iter()
        .zip(t)
        .map(|(&p, &t)| {
            let (p, t) = (p.widen().clamp(lo, hi), t.widen());
            -(t * Float::ln(p) + (1.0 - t) * Float::ln(1.0 - p))
        })
        .sum();
    let value = scalar(total / p.len() as f64);
    tape.push("bce_loss", value, &[prob, target], BceOp { clamp_eps })
}

struct BceOp {
    clamp_eps: f64,
}

impl<T: Real> Backward<T> for BceOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (p, t) = (inputs[0].data(), inputs[1].data());
        let scale = g[0].widen() / p.len() as f64;
        let (lo, hi) = (self.clamp_eps, 1.0 - self.clamp_eps);
        let dp = needs[0].then(|| {
            p.iter()
                .zip(t)
                .map(|(&p, &t)| {
                    let (p, t) = (p.widen(), t.widen());
                    if p < lo || p > hi {
                        return T::zero();
                    }
                    T::from_f64_lossy(scale * (-t / p + (1.0 - t) / (1.0 - p)))
                })
                .collect()
        });
        vec![dp, None]
    }
}

/// Soft Dice loss `1 - (2Σpt + ε) / (Σp + Σt + ε)`, computed per batch sample
/// and averaged over the batch.
pub fn soft_dice_loss<T: Real>(tape: &mut Tape<T>, prob: Var, target: Var, smooth_eps: f64, squared: bool) -> Result<Var> {
    same_shape(tape, "soft_dice_loss", prob, target)?;
    let n = tape.shape(prob)[0];
    let per = tape.value(prob).sample_len();
    let (p, t) = (tape.value(prob).data(), tape.value(target).data());
    let mut sums = Vec::with_capacity(n);
    let mut loss = 0.0;
    for b in 0..n {
        let (ps, ts) = (&p[b * per..(b + 1) * per], &t[b * per..(b + 1) * per]);
        let inter: f64 = ps.iter().zip(ts).map(|(a, b)| a.widen() * b.widen()).sum();
        let denom: f64 = if squared {
            ps.iter().zip(ts).map(|(a, b)| a.widen() * a.widen() + b.widen() * b.widen()).sum()
        } else {
            ps.iter().chain(ts).map(|a| a.widen()).sum()
        };
        loss += 1.0 - (2.0 * inter + smooth_eps) / (denom + smooth_eps);
        sums.push((inter, denom));
    }
    let value = scalar(loss / n as f64);
    tape.push("soft_dice_loss", value, &[prob, target], DiceOp { smooth_eps, squared, sums })
}

struct DiceOp {
    smooth_eps: f64,
    squared: bool,
    sums: Vec<(f64, f64)>,
}

impl<T: Real> Backward<T> for DiceOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None, None];
        }
        let (p, t) = (inputs[0].data(), inputs[1].data());
        let n = self.sums.len();
        let per = p.len() / n;
        let scale = g[0].widen() / n as f64;
        let mut dp = Vec::with_capacity(p.len());
        for (b, &(inter, denom)) in self.sums.iter().enumerate() {
            let num = 2.0 * inter + self.smooth_eps;
            let den = denom + self.smooth_eps;
            for i in b * per..(b + 1) * per {
                let (pv, tv) = (p[i].widen(), t[i].widen());
                let dden = if self.squared { 2.0 * pv } else { 1.0 };
                let d = -(2.0 * tv * den - num * dden) / (den * den);
                dp.push(T::from_f64_lossy(scale * d));
            }
        }
        vec![Some(dp), None]
    }
}

/// `alpha · BCE + (1 - alpha) · Dice`.
pub fn combined_loss<T: Real>(tape: &mut Tape<T>, prob: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let bce = bce_loss(tape, prob, target, cfg.clamp_eps)?;
    let dice = soft_dice_loss(tape, prob, target, cfg.smooth_eps, cfg.squared_dice)?;
    let a = tape.scale(bce, cfg.alpha)?;
    let b = tape.scale(dice, 1.0 - cfg.alpha)?;
    tape.add(a, b)
}
