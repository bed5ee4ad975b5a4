//! Rank-5 dense tensors laid out as (batch, channel, depth, height, width).

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::scalar::Real;
use crate::volume::Volume;

/// Extents of a rank-5 tensor: `[n, c, d, h, w]`, width fastest.
pub type Shape = [usize; 5];

/// Number of elements described by `shape`.
pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

/// A dense rank-5 array.
///
/// Gradients are not stored here; they live on the [`Tape`](crate::Tape)
/// node that owns a recorded copy of the tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self { shape, data: vec![value; numel(&shape)] }
    }

    /// Wraps `data`, returning `None` when its length disagrees with `shape`.
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Option<Self> {
        (data.len() == numel(&shape)).then_some(Self { shape, data })
    }

    /// A (1, 1, nz, ny, nx) tensor holding the voxels of `v`.
    ///
    /// Volume storage is x-fastest, so width maps to x and depth to z.
    pub fn from_volume(v: &Volume) -> Self {
        let [nx, ny, nz] = v.extents();
        let data = v.data().iter().map(|&x| T::from_f64_lossy(x)).collect();
        Self { shape: [1, 1, nz, ny, nx], data }
    }

    /// Stacks tensors along the batch axis. All inputs must share c/d/h/w.
    pub fn stack(items: &[Tensor<T>]) -> Option<Self> {
        let first = items.first()?;
        let inner = &first.shape[1..];
        if items.iter().any(|t| &t.shape[1..] != inner) {
            return None;
        }
        let n = items.iter().map(|t| t.shape[0]).sum();
        let mut data = Vec::with_capacity(n * first.sample_len());
        for t in items {
            data.extend_from_slice(&t.data);
        }
        Some(Self { shape: [n, first.shape[1], first.shape[2], first.shape[3], first.shape[4]], data })
    }

    /// Channel `c` of sample `n` as a volume with the given spacing.
    pub fn to_volume(&self, n: usize, c: usize, spacing: [f64; 3]) -> Volume {
        let [_, _, d, h, w] = self.shape;
        let plane = self.channel(n, c);
        Volume::new([w, h, d], spacing, plane.iter().map(|v| v.widen()).collect())
            .expect("tensor extents are positive")
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Elements per batch sample (c·d·h·w).
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Elements per channel (d·h·w).
    pub fn spatial_len(&self) -> usize {
        self.shape[2..].iter().product()
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let s = self.spatial_len();
        let start = (n * self.shape[1] + c) * s;
        &self.data[start..start + s]
    }

    /// Converts every element to another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::from_f64_lossy(v.widen())).collect() }
    }

    /// Sum of all elements accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.widen()).sum()
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("len", &self.data.len()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_axis_mapping() {
        let v = Volume::new([3, 2, 1], [1.0, 1.0, 1.0], (0..6).map(f64::from).collect()).unwrap();
        let t = Tensor::<f32>::from_volume(&v);
        assert_eq!(t.shape(), [1, 1, 1, 2, 3]);
        assert_eq!(t.to_volume(0, 0, [1.0, 1.0, 1.0]), v);
    }

    #[test]
    fn stack_rejects_mismatched_samples() {
        let a = Tensor::<f32>::zeros([1, 1, 2, 2, 2]);
        let b = Tensor::<f32>::zeros([1, 2, 2, 2, 2]);
        assert!(Tensor::stack(&[a.clone(), b]).is_none());
        assert_eq!(Tensor::stack(&[a.clone(), a]).unwrap().shape(), [2, 1, 2, 2, 2]);
    }
}
