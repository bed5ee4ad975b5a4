//! Reverse-mode differentiation over a linear tape of tensor operators.
//!
//! Every operator appends a node holding its output value and, when any
//! input requires a gradient, a backward closure. [`Tape::backward`] walks
//! the nodes in exact reverse order, accumulating gradients with `+=` so
//! fan-out is handled naturally. Only leaf gradients are retained after the
//! pass; intermediate buffers are dropped as soon as they are consumed.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::kernels::{self, ConvGeom, GroupStats};
use crate::scalar::{all_finite, Real};
use crate::tensor::{numel, Shape, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: alloc::string::String },
    #[error("conv3d: output would be empty for input {input:?}, kernel {kernel}, stride {stride}, pad {pad}")]
    EmptyOutput { input: [usize; 3], kernel: usize, stride: usize, pad: usize },
    #[error("group_norm: {channels} channels are not divisible into {groups} groups")]
    IndivisibleGroups { channels: usize, groups: usize },
    #[error("loss is not recorded on this tape")]
    DetachedLoss,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Shape),
    #[error("{op}: non-finite values")]
    NonFinite { op: &'static str },
    #[error("{op}: invalid argument ({detail})")]
    InvalidArgument { op: &'static str, detail: alloc::string::String },
}

pub type Result<T, E = AutodiffError> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<alloc::string::String>) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail: detail.into() }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Analytic adjoint of a recorded operator.
pub(crate) trait Backward<T: Real> {
    /// Gradients for each input (`None` where `needs[i]` is false).
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    inputs: Vec<usize>,
    op: Option<(&'static str, Box<dyn Backward<T>>)>,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// A recording of operators in execution order.
pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, inputs: Vec::new(), op: None });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    /// Moves the value out of the tape, leaving an empty placeholder.
    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        let shape = self.shape(v);
        let node = &mut self.nodes[v.index];
        core::mem::replace(&mut node.value, Tensor::from_vec([0, shape[1], 0, 0, 0], Vec::new()).expect("empty"))
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index]
    }

    fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.index < self.nodes.len()
    }

    /// Appends an operator result after checking it is finite.
    pub(crate) fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        backward: impl Backward<T> + 'static,
    ) -> Result<Var> {
        if !all_finite(value.data()) {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&v| self.node(v).requires_grad);
        let op: Option<(&'static str, Box<dyn Backward<T>>)> =
            if requires_grad { Some((name, Box::new(backward))) } else { None };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            inputs: inputs.iter().map(|v| v.index).collect(),
            op,
        });
        Ok(Var { tape: self.id, index: self.nodes.len() - 1 })
    }

    /// Back-propagates from a scalar `loss`, seeding its gradient with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.owns(loss) {
            return Err(AutodiffError::DetachedLoss);
        }
        let shape = self.shape(loss);
        if numel(&shape) != 1 {
            return Err(AutodiffError::NotScalar(shape));
        }
        self.nodes[loss.index].grad = Some(vec![T::one()]);
        for i in (0..=loss.index).rev() {
            if self.nodes[i].op.is_none() {
                continue;
            }
            let Some(grad_out) = self.nodes[i].grad.take() else { continue };
            let node = &self.nodes[i];
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let (name, op) = node.op.as_ref().expect("checked above");
            let name = *name;
            let grads = op.backward(&inputs, &node.value, &grad_out, &needs);
            let targets = node.inputs.clone();
            for (j, g) in targets.into_iter().zip(grads) {
                let Some(g) = g else { continue };
                if !self.nodes[j].requires_grad {
                    continue;
                }
                if !all_finite(&g) {
                    return Err(AutodiffError::NonFinite { op: name });
                }
                match &mut self.nodes[j].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// 3D cross-correlation with zero padding; `weight` is
    /// (c_out, c_in, k, k, k) and `bias` holds c_out values.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        if ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] || ws[2] == 0 {
            return Err(shape_err("conv3d", alloc::format!("input {xs:?} vs weight {ws:?}")));
        }
        if numel(&bs) != ws[0] {
            return Err(shape_err("conv3d", alloc::format!("bias {bs:?} for {} output channels", ws[0])));
        }
        let geom = ConvGeom::new(xs, ws, stride, pad).ok_or(AutodiffError::EmptyOutput {
            input: [xs[2], xs[3], xs[4]],
            kernel: ws[2],
            stride,
            pad,
        })?;
        let out = kernels::conv3d_forward(
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
        );
        let value = Tensor::from_vec(geom.out_shape(), out).expect("kernel output length");
        self.push("conv3d", value, &[x, weight, bias], ConvOp(geom))
    }

    /// Group normalization with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x);
        let c = xs[1];
        if groups == 0 || c % groups != 0 {
            return Err(AutodiffError::IndivisibleGroups { channels: c, groups });
        }
        if numel(&self.shape(gamma)) != c || numel(&self.shape(beta)) != c {
            return Err(shape_err("group_norm", "gamma/beta must hold one value per channel"));
        }
        if !(eps > 0.0) {
            return Err(AutodiffError::InvalidArgument { op: "group_norm", detail: "eps must be positive".into() });
        }
        let (y, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            xs,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = Tensor::from_vec(xs, y).expect("same shape");
        self.push("group_norm", value, &[x, gamma, beta], GroupNormOp { groups, stats })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        self.push("relu", value, &[x], ReluOp)
    }

    /// Logistic sigmoid in the overflow-free two-branch form.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push("sigmoid", value, &[x], SigmoidOp)
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        if self.shape(x) != self.shape(y) {
            return Err(shape_err("add", alloc::format!("{:?} vs {:?}", self.shape(x), self.shape(y))));
        }
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().zip(self.value(y).data()).for_each(|(a, b)| *a += *b);
        self.push("add", value, &[x, y], AddOp)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64_lossy(factor);
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= f);
        self.push("scale", value, &[x], ScaleOp(f))
    }

    /// Trilinear ×2 upsampling with cell-centre alignment (`align_corners = false`).
    pub fn upsample_trilinear(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let (out, shape) = kernels::upsample2_forward(self.value(x).data(), xs);
        let value = Tensor::from_vec(shape, out).expect("kernel output length");
        self.push("upsample_trilinear", value, &[x], UpsampleOp)
    }

    /// Stacks channels of `x` then `y`.
    pub fn concat_channels(&mut self, x: Var, y: Var) -> Result<Var> {
        let (a, b) = (self.shape(x), self.shape(y));
        if a[0] != b[0] || a[2..] != b[2..] {
            return Err(shape_err("concat_channels", alloc::format!("{a:?} vs {b:?}")));
        }
        let s = numel(&[1, 1, a[2], a[3], a[4]]);
        let mut out = Vec::with_capacity(numel(&a) + numel(&b));
        for n in 0..a[0] {
            out.extend_from_slice(&self.value(x).data()[n * a[1] * s..(n + 1) * a[1] * s]);
            out.extend_from_slice(&self.value(y).data()[n * b[1] * s..(n + 1) * b[1] * s]);
        }
        let value = Tensor::from_vec([a[0], a[1] + b[1], a[2], a[3], a[4]], out).expect("concat length");
        self.push("concat_channels", value, &[x, y], ConcatOp { cx: a[1], cy: b[1] })
    }

    /// Zero-pads the spatial axes by `before`/`after` voxels.
    pub fn pad_spatial(&mut self, x: Var, before: [usize; 3], after: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x);
        let shape = [xs[0], xs[1], xs[2] + before[0] + after[0], xs[3] + before[1] + after[1], xs[4] + before[2] + after[2]];
        let mut out = vec![T::zero(); numel(&shape)];
        kernels::spatial_box(self.value(x).data(), shape, before, [xs[2], xs[3], xs[4]], &mut out, true);
        let value = Tensor::from_vec(shape, out).expect("pad length");
        self.push("pad_spatial", value, &[x], BoxOp { offset: before, crop: false })
    }

    /// Extracts the spatial box starting at `offset` with `extents`.
    pub fn crop_spatial(&mut self, x: Var, offset: [usize; 3], extents: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x);
        if (0..3).any(|a| offset[a] + extents[a] > xs[a + 2]) {
            return Err(shape_err("crop_spatial", alloc::format!("box {offset:?}+{extents:?} outside {xs:?}")));
        }
        let shape = [xs[0], xs[1], extents[0], extents[1], extents[2]];
        let mut out = vec![T::zero(); numel(&shape)];
        kernels::spatial_box(self.value(x).data(), xs, offset, extents, &mut out, false);
        let value = Tensor::from_vec(shape, out).expect("crop length");
        self.push("crop_spatial", value, &[x], BoxOp { offset, crop: true })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_f64();
        self.push("sum", Tensor::full([1, 1, 1, 1, 1], T::from_f64_lossy(s)), &[x], SumOp)
    }

    /// `Σ weights ⊙ x` as a scalar; `weights` is a constant.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(shape_err("weighted_sum", "weights must match the input length"));
        }
        let s: f64 = self.value(x).data().iter().zip(weights).map(|(a, b)| a.widen() * b.widen()).sum();
        self.push("weighted_sum", Tensor::full([1, 1, 1, 1, 1], T::from_f64_lossy(s)), &[x], WeightedSumOp(weights.to_vec()))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

struct ConvOp(ConvGeom);

impl<T: Real> Backward<T> for ConvOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let grads = kernels::conv3d_backward(inputs[0].data(), inputs[1].data(), g, &self.0, [needs[0], needs[1], needs[2]]);
        vec![grads.x, grads.w, grads.b]
    }
}

struct GroupNormOp {
    groups: usize,
    stats: GroupStats,
}

impl<T: Real> Backward<T> for GroupNormOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (dx, dgamma, dbeta) = kernels::group_norm_backward(
            inputs[0].data(),
            inputs[0].shape(),
            self.groups,
            inputs[1].data(),
            &self.stats,
            g,
        );
        vec![needs[0].then_some(dx), needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    }
}

struct ReluOp;

impl<T: Real> Backward<T> for ReluOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let dx = inputs[0].data().iter().zip(g).map(|(&x, &g)| if x > T::zero() { g } else { T::zero() }).collect();
        vec![Some(dx)]
    }
}

struct SigmoidOp;

impl<T: Real> Backward<T> for SigmoidOp {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let dx = out.data().iter().zip(g).map(|(&s, &g)| g * s * (T::one() - s)).collect();
        vec![Some(dx)]
    }
}

struct AddOp;

impl<T: Real> Backward<T> for AddOp {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
    }
}

struct ScaleOp<T>(T);

impl<T: Real> Backward<T> for ScaleOp<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&v| v * self.0).collect())]
    }
}

struct UpsampleOp;

impl<T: Real> Backward<T> for UpsampleOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(kernels::upsample2_backward(g, inputs[0].shape()))]
    }
}

struct ConcatOp {
    cx: usize,
    cy: usize,
}

impl<T: Real> Backward<T> for ConcatOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = inputs[0].spatial_len();
        let n = inputs[0].shape()[0];
        let c = self.cx + self.cy;
        let gx = needs[0].then(|| (0..n).flat_map(|i| g[(i * c) * s..(i * c + self.cx) * s].iter().copied()).collect());
        let gy = needs[1].then(|| (0..n).flat_map(|i| g[(i * c + self.cx) * s..(i + 1) * c * s].iter().copied()).collect());
        vec![gx, gy]
    }
}

/// Crop and zero-pad are mutual adjoints.
struct BoxOp {
    offset: [usize; 3],
    crop: bool,
}

impl<T: Real> Backward<T> for BoxOp {
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let input = inputs[0];
        let mut gx = vec![T::zero(); input.numel()];
        if self.crop {
            kernels::spatial_box(g, input.shape(), self.offset, out.spatial(), &mut gx, true);
        } else {
            kernels::spatial_box(g, out.shape(), self.offset, input.spatial(), &mut gx, false);
        }
        vec![Some(gx)]
    }
}

struct SumOp;

impl<T: Real> Backward<T> for SumOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0]; inputs[0].numel()])]
    }
}

struct WeightedSumOp<T>(Vec<T>);

impl<T: Real> Backward<T> for WeightedSumOp<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(self.0.iter().map(|&w| w * g[0]).collect())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_vec(shape, (0..numel(&shape)).map(f).collect()).unwrap()
    }

    #[test]
    fn identity_kernel_conv() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 3, 3, 3], |i| i as f64), false);
        let w = tape.leaf(Tensor::full([1, 1, 1, 1, 1], 1.0), false);
        let b = tape.leaf(Tensor::zeros([1, 1, 1, 1, 1]), false);
        let y = tape.conv3d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_counts_in_bounds_taps() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 1, 5, 5, 5], 1.0), false);
        let w = tape.leaf(Tensor::full([1, 1, 3, 3, 3], 1.0), false);
        let b = tape.leaf(Tensor::zeros([1, 1, 1, 1, 1]), false);
        let y = tape.conv3d(x, w, b, 1, 1).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[2 * 25 + 2 * 5 + 2], 27.0);
        assert_eq!(v[0], 8.0);
    }

    #[test]
    fn strided_conv_halves_extent() {
        let g = ConvGeom::new([1, 1, 128, 128, 128], [1, 1, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.output, [64, 64, 64]);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 2, 2, 2]), false);
        let w = tape.leaf(Tensor::zeros([1, 1, 5, 5, 5]), false);
        let b = tape.leaf(Tensor::zeros([1, 1, 1, 1, 1]), false);
        assert!(matches!(tape.conv3d(x, w, b, 1, 0), Err(AutodiffError::EmptyOutput { .. })));
        let w2 = tape.leaf(Tensor::zeros([1, 2, 1, 1, 1]), false);
        assert!(matches!(tape.conv3d(x, w2, b, 1, 0), Err(AutodiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn group_norm_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 2, 2, 2, 2], 3.0), false);
        let one = tape.leaf(Tensor::full([1, 2, 1, 1, 1], 1.0), false);
        let zero = tape.leaf(Tensor::zeros([1, 2, 1, 1, 1]), false);
        let five = tape.leaf(Tensor::full([1, 2, 1, 1, 1], 5.0), false);
        let y = tape.group_norm(x, 1, one, zero, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let r = tape.leaf(t([1, 2, 2, 2, 2], |i| i as f64), false);
        let y = tape.group_norm(r, 2, zero, five, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
        // Channel values {1, 3}: mean 2, population variance 1.
        let x = tape.leaf(t([1, 2, 1, 1, 1], |i| if i == 0 { 1.0 } else { 3.0 }), false);
        let y = tape.group_norm(x, 1, one, zero, 1e-5).unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y).data()[0] + expected).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - expected).abs() < 1e-12);
        let x = tape.leaf(Tensor::zeros([1, 3, 1, 1, 1]), false);
        let g3 = tape.leaf(Tensor::zeros([1, 3, 1, 1, 1]), false);
        assert_eq!(
            tape.group_norm(x, 2, g3, g3, 1e-5),
            Err(AutodiffError::IndivisibleGroups { channels: 3, groups: 2 })
        );
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 1, 1, 3], |i| [-2.0, 3.0, 0.0][i]), false);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 3.0, 0.0]);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[2], 0.5);
        let big = tape.leaf(t([1, 1, 1, 1, 2], |i| [-1000.0, 1000.0][i]), false);
        let s = tape.sigmoid(big).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0, 1.0]);
        let z = tape.leaf(Tensor::zeros([1, 1, 1, 1, 3]), false);
        let a = tape.add(x, z).unwrap();
        assert_eq!(tape.value(a), tape.value(x));
        let other = tape.leaf(Tensor::zeros([1, 1, 1, 3, 1]), false);
        assert!(tape.add(x, other).is_err());
    }

    #[test]
    fn upsample_constant_and_ramp() {
        let mut tape = Tape::<f64>::new();
        let c = tape.leaf(Tensor::full([1, 2, 2, 3, 1], 4.5), true);
        let u = tape.upsample_trilinear(c).unwrap();
        assert_eq!(tape.shape(u), [1, 2, 4, 6, 2]);
        assert!(tape.value(u).data().iter().all(|&v| v == 4.5));
        let g: Vec<f64> = (0..96).map(|i| (i % 7) as f64 - 2.0).collect();
        let loss = tape.weighted_sum(u, &g).unwrap();
        tape.backward(loss).unwrap();
        let scattered: f64 = tape.grad(c).unwrap().iter().sum();
        assert!((scattered - g.iter().sum::<f64>()).abs() < 1e-12);

        let ramp = tape.leaf(t([1, 1, 2, 1, 1], |i| i as f64), false);
        let u = tape.upsample_trilinear(ramp).unwrap();
        assert_eq!(tape.shape(u), [1, 1, 4, 2, 2]);
        let d: Vec<f64> = (0..4).map(|z| tape.value(u).data()[z * 4]).collect();
        assert_eq!(d, [0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn concat_shapes_and_grads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 2, 4, 4, 4], |i| i as f64), true);
        let y = tape.leaf(t([1, 3, 4, 4, 4], |i| -(i as f64)), true);
        let c = tape.concat_channels(x, y).unwrap();
        assert_eq!(tape.shape(c), [1, 5, 4, 4, 4]);
        assert_eq!(&tape.value(c).data()[..128], tape.value(x).data());
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
        assert!(tape.grad(y).unwrap().iter().all(|&g| g == 1.0));
        let bad = tape.leaf(Tensor::zeros([1, 1, 4, 4, 3]), false);
        assert!(tape.concat_channels(x, bad).is_err());
    }

    #[test]
    fn backward_sum_and_fan_out() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 2, 2, 2], |i| i as f64), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 2, 2, 2], |i| i as f64), true);
        let a = tape.add(x, x).unwrap();
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn backward_errors() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.leaf(Tensor::full([1, 1, 1, 1, 1], 1.0), true);
        assert_eq!(b.backward(x), Err(AutodiffError::DetachedLoss));
        let y = a.leaf(Tensor::zeros([1, 1, 1, 1, 2]), true);
        assert!(matches!(a.backward(y), Err(AutodiffError::NotScalar(_))));
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 1, 1, 1, 1], f64::MAX), false);
        assert_eq!(tape.scale(x, 10.0), Err(AutodiffError::NonFinite { op: "scale" }));
    }

    #[test]
    fn pad_then_crop_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 2, 2, 3, 1], |i| i as f64 + 1.0), true);
        let p = tape.pad_spatial(x, [1, 0, 2], [0, 1, 1]).unwrap();
        assert_eq!(tape.shape(p), [1, 2, 3, 4, 4]);
        assert_eq!(tape.value(p).sum_f64(), tape.value(x).sum_f64());
        let c = tape.crop_spatial(p, [1, 0, 2], [2, 3, 1]).unwrap();
        assert_eq!(tape.value(c), tape.value(x));
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
    }
}
