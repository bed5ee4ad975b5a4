//! Forward and adjoint kernels behind the tape operators.
//!
//! Convolution lowers each sample to an im2col matrix processed in slabs of
//! output depth planes, so scratch memory stays bounded and every reduction
//! runs in a fixed order.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Real;
use crate::tensor::Shape;

/// Upper bound on im2col scratch elements per slab.
const COL_BUDGET: usize = 1 << 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// `None` when some output extent would be empty.
    pub fn new(x: Shape, w: Shape, stride: usize, pad: usize) -> Option<Self> {
        let k = w[2];
        let input = [x[2], x[3], x[4]];
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * pad;
            if span < k || stride == 0 {
                return None;
            }
            output[a] = (span - k) / stride + 1;
        }
        Some(Self { n: x[0], ci: x[1], co: w[0], k, stride, pad, input, output })
    }

    pub fn out_shape(&self) -> Shape {
        [self.n, self.co, self.output[0], self.output[1], self.output[2]]
    }

    fn rows(&self) -> usize {
        self.ci * self.k * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn slab_planes(&self) -> usize {
        (COL_BUDGET / (self.rows() * self.plane()).max(1)).clamp(1, self.output[0])
    }
}

/// Input index along one axis for output index `o` and tap `t`.
#[inline]
fn tap(o: usize, t: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let i = (o * stride + t).checked_sub(pad)?;
    (i < len).then_some(i)
}

/// Output positions `[lo, hi)` whose unit-stride tap `kw` lands inside a row
/// of length `w`.
#[inline]
fn unit_stride_span(out_len: usize, w: usize, kw: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kw).min(out_len);
    let hi = (w + pad).saturating_sub(kw).min(out_len).max(lo);
    (lo, hi)
}

#[inline]
fn gather_row<T: Real>(seg: &mut [T], src: &[T], kw: usize, stride: usize, pad: usize) {
    if stride == 1 {
        let (lo, hi) = unit_stride_span(seg.len(), src.len(), kw, pad);
        seg[..lo].fill(T::zero());
        seg[lo..hi].copy_from_slice(&src[lo + kw - pad..hi + kw - pad]);
        seg[hi..].fill(T::zero());
        return;
    }
    for (xo, out) in seg.iter_mut().enumerate() {
        *out = match tap(xo, kw, stride, pad, src.len()) {
            Some(iw) => src[iw],
            None => T::zero(),
        };
    }
}

#[inline]
fn scatter_row<T: Real>(seg: &[T], dst: &mut [T], kw: usize, stride: usize, pad: usize) {
    if stride == 1 {
        let (lo, hi) = unit_stride_span(seg.len(), dst.len(), kw, pad);
        for (d, v) in dst[lo + kw - pad..hi + kw - pad].iter_mut().zip(&seg[lo..hi]) {
            *d += *v;
        }
        return;
    }
    for (xo, v) in seg.iter().enumerate() {
        if let Some(iw) = tap(xo, kw, stride, pad, dst.len()) {
            dst[iw] += *v;
        }
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, od0: usize, od1: usize, col: &mut [T]) {
    let [d, h, w] = g.input;
    let [_, oh, ow] = g.output;
    let pc = (od1 - od0) * oh * ow;
    let k = g.k;
    for c in 0..g.ci {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let dst = &mut col[row * pc..(row + 1) * pc];
                    let mut o = 0;
                    for od in od0..od1 {
                        let Some(id) = tap(od, kd, g.stride, g.pad, d) else {
                            dst[o..o + oh * ow].fill(T::zero());
                            o += oh * ow;
                            continue;
                        };
                        for y in 0..oh {
                            let seg = &mut dst[o..o + ow];
                            o += ow;
                            let Some(ih) = tap(y, kh, g.stride, g.pad, h) else {
                                seg.fill(T::zero());
                                continue;
                            };
                            let src = &x[((c * d + id) * h + ih) * w..][..w];
                            gather_row(seg, src, kw, g.stride, g.pad);
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, od0: usize, od1: usize, gx: &mut [T]) {
    let [d, h, w] = g.input;
    let [_, oh, ow] = g.output;
    let pc = (od1 - od0) * oh * ow;
    let k = g.k;
    for c in 0..g.ci {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let src = &col[row * pc..(row + 1) * pc];
                    let mut o = 0;
                    for od in od0..od1 {
                        let Some(id) = tap(od, kd, g.stride, g.pad, d) else {
                            o += oh * ow;
                            continue;
                        };
                        for y in 0..oh {
                            let seg = &src[o..o + ow];
                            o += ow;
                            let Some(ih) = tap(y, kh, g.stride, g.pad, h) else { continue };
                            let dst = &mut gx[((c * d + id) * h + ih) * w..][..w];
                            scatter_row(seg, dst, kw, g.stride, g.pad);
                        }
                    }
                }
            }
        }
    }
}

/// Row-major matrix view used to call into the GEMM kernels safely.
struct View<'a, T> {
    data: &'a [T],
    rs: usize,
    cs: usize,
}

fn last_index(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 { 0 } else { (rows - 1) * rs + (cols - 1) * cs }
}

/// `c = a·b + beta·c` with `a` (m×k), `b` (k×n), `c` (m×n, row stride `rsc`).
fn gemm<T: Real>(m: usize, k: usize, n: usize, a: View<'_, T>, b: View<'_, T>, beta: T, c: &mut [T], rsc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(last_index(m, k, a.rs, a.cs) < a.data.len().max(1));
    assert!(last_index(k, n, b.rs, b.cs) < b.data.len().max(1));
    assert!(last_index(m, n, rsc, 1) < c.len());
    // SAFETY: the asserts above bound every addressed element, and `c` is a
    // unique borrow distinct from `a` and `b`.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        )
    }
}

pub(crate) fn conv3d_forward<T: Real>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.output.iter().product::<usize>();
    let kk = g.rows();
    let in_len = g.ci * g.input.iter().product::<usize>();
    let mut out = vec![T::zero(); g.n * g.co * p];
    let slab = g.slab_planes();
    let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); kk * slab * g.plane()] };
    for n in 0..g.n {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let os = &mut out[n * g.co * p..(n + 1) * g.co * p];
        if g.pointwise() {
            gemm(g.co, kk, p, View { data: w, rs: kk, cs: 1 }, View { data: xs, rs: p, cs: 1 }, T::zero(), os, p);
        } else {
            let mut od0 = 0;
            while od0 < g.output[0] {
                let od1 = (od0 + slab).min(g.output[0]);
                let pc = (od1 - od0) * g.plane();
                im2col(xs, g, od0, od1, &mut col[..kk * pc]);
                gemm(
                    g.co,
                    kk,
                    pc,
                    View { data: w, rs: kk, cs: 1 },
                    View { data: &col[..kk * pc], rs: pc, cs: 1 },
                    T::zero(),
                    &mut os[od0 * g.plane()..],
                    p,
                );
                od0 = od1;
            }
        }
        for (c, row) in os.chunks_exact_mut(p).enumerate() {
            let bias = b[c];
            row.iter_mut().for_each(|v| *v += bias);
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub w: Option<Vec<T>>,
    pub b: Option<Vec<T>>,
}

pub(crate) fn conv3d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    needs: [bool; 3],
) -> ConvGrads<T> {
    let p = g.output.iter().product::<usize>();
    let kk = g.rows();
    let in_len = g.ci * g.input.iter().product::<usize>();
    let mut gx = needs[0].then(|| vec![T::zero(); g.n * in_len]);
    let mut gw = needs[1].then(|| vec![T::zero(); g.co * kk]);
    let gb = needs[2].then(|| {
        let mut gb = vec![0.0f64; g.co];
        for n in 0..g.n {
            for (c, acc) in gb.iter_mut().enumerate() {
                let start = (n * g.co + c) * p;
                *acc += gout[start..start + p].iter().map(|v| v.widen()).sum::<f64>();
            }
        }
        gb.into_iter().map(T::from_f64_lossy).collect::<Vec<T>>()
    });
    if gx.is_none() && gw.is_none() {
        return ConvGrads { x: gx, w: gw, b: gb };
    }
    let slab = g.slab_planes();
    let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); kk * slab * g.plane()] };
    for n in 0..g.n {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let gs = &gout[n * g.co * p..(n + 1) * g.co * p];
        if g.pointwise() {
            if let Some(gw) = gw.as_deref_mut() {
                gemm(g.co, p, kk, View { data: gs, rs: p, cs: 1 }, View { data: xs, rs: 1, cs: p }, T::one(), gw, kk);
            }
            if let Some(gx) = gx.as_deref_mut() {
                let gxs = &mut gx[n * in_len..(n + 1) * in_len];
                gemm(kk, g.co, p, View { data: w, rs: 1, cs: kk }, View { data: gs, rs: p, cs: 1 }, T::zero(), gxs, p);
            }
            continue;
        }
        let mut od0 = 0;
        while od0 < g.output[0] {
            let od1 = (od0 + slab).min(g.output[0]);
            let pc = (od1 - od0) * g.plane();
            let go = &gs[od0 * g.plane()..];
            if let Some(gw) = gw.as_deref_mut() {
                im2col(xs, g, od0, od1, &mut col[..kk * pc]);
                gemm(
                    g.co,
                    pc,
                    kk,
                    View { data: go, rs: p, cs: 1 },
                    View { data: &col[..kk * pc], rs: 1, cs: pc },
                    T::one(),
                    gw,
                    kk,
                );
            }
            if let Some(gx) = gx.as_deref_mut() {
                let c = &mut col[..kk * pc];
                gemm(kk, g.co, pc, View { data: w, rs: 1, cs: kk }, View { data: go, rs: p, cs: 1 }, T::zero(), c, pc);
                col2im(c, g, od0, od1, &mut gx[n * in_len..(n + 1) * in_len]);
            }
            od0 = od1;
        }
    }
    ConvGrads { x: gx, w: gw, b: gb }
}

/// Per (sample, group) mean and reciprocal standard deviation.
pub(crate) type GroupStats = Vec<(f64, f64)>;

pub(crate) fn group_norm_forward<T: Real>(
    x: &[T],
    shape: Shape,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, GroupStats) {
    let [n, c, ..] = shape;
    let s: usize = shape[2..].iter().product();
    let cpg = c / groups;
    let m = (cpg * s) as f64;
    let mut y = vec![T::zero(); x.len()];
    let mut stats = Vec::with_capacity(n * groups);
    for ni in 0..n {
        for gi in 0..groups {
            let start = (ni * c + gi * cpg) * s;
            let xs = &x[start..start + cpg * s];
            let mean = xs.iter().map(|v| v.widen()).sum::<f64>() / m;
            let var = xs.iter().map(|v| (v.widen() - mean) * (v.widen() - mean)).sum::<f64>() / m;
            let rstd = 1.0 / num_traits::Float::sqrt(var + eps);
            stats.push((mean, rstd));
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let (ga, be) = (gamma[ch].widen(), beta[ch].widen());
                let off = start + cc * s;
                for i in off..off + s {
                    y[i] = T::from_f64_lossy((x[i].widen() - mean) * rstd * ga + be);
                }
            }
        }
    }
    (y, stats)
}

pub(crate) fn group_norm_backward<T: Real>(
    x: &[T],
    shape: Shape,
    groups: usize,
    gamma: &[T],
    stats: &GroupStats,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, ..] = shape;
    let s: usize = shape[2..].iter().product();
    let cpg = c / groups;
    let m = (cpg * s) as f64;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for ni in 0..n {
        for gi in 0..groups {
            let (mean, rstd) = stats[ni * groups + gi];
            let start = (ni * c + gi * cpg) * s;
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let ga = gamma[ch].widen();
                let off = start + cc * s;
                let (mut sg, mut sb) = (0.0, 0.0);
                for i in off..off + s {
                    let xhat = (x[i].widen() - mean) * rstd;
                    let g = dy[i].widen();
                    sg += g * xhat;
                    sb += g;
                    sum_dxhat += g * ga;
                    sum_dxhat_xhat += g * ga * xhat;
                }
                dgamma[ch] += sg;
                dbeta[ch] += sb;
            }
            let (a, b) = (sum_dxhat / m, sum_dxhat_xhat / m);
            for cc in 0..cpg {
                let ga = gamma[gi * cpg + cc].widen();
                let off = start + cc * s;
                for i in off..off + s {
                    let xhat = (x[i].widen() - mean) * rstd;
                    dx[i] = T::from_f64_lossy(rstd * (dy[i].widen() * ga - a - xhat * b));
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect();
    (dx, cast(dgamma), cast(dbeta))
}

/// Interpolation taps `(i0, i1, w0, w1)` for doubling an axis of length `n`
/// with cell-centre alignment.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|j| {
            let c = ((j as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = c as usize;
            let i1 = (i0 + 1).min(n - 1);
            let lambda = c - i0 as f64;
            (i0, i1, 1.0 - lambda, lambda)
        })
        .collect()
}

fn split_axis(shape: Shape, axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn upsample_axis<T: Real>(src: &[T], shape: Shape, axis: usize) -> (Vec<T>, Shape) {
    let (outer, len, inner) = split_axis(shape, axis);
    let taps = upsample_taps(len);
    let mut out = vec![T::zero(); outer * 2 * len * inner];
    for o in 0..outer {
        let s = &src[o * len * inner..(o + 1) * len * inner];
        let d = &mut out[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let (w0, w1) = (T::from_f64_lossy(w0), T::from_f64_lossy(w1));
            let dst = &mut d[j * inner..(j + 1) * inner];
            let a = &s[i0 * inner..(i0 + 1) * inner];
            let b = &s[i1 * inner..(i1 + 1) * inner];
            for ((v, &x0), &x1) in dst.iter_mut().zip(a).zip(b) {
                *v = w0 * x0 + w1 * x1;
            }
        }
    }
    let mut next = shape;
    next[axis] *= 2;
    (out, next)
}

/// Adjoint of [`upsample_axis`]; `shape` is the (smaller) input shape.
fn upsample_axis_adjoint<T: Real>(g: &[T], shape: Shape, axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let taps = upsample_taps(len);
    let mut out = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let s = &g[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        let d = &mut out[o * len * inner..(o + 1) * len * inner];
        for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let (w0, w1) = (T::from_f64_lossy(w0), T::from_f64_lossy(w1));
            let gs = &s[j * inner..(j + 1) * inner];
            for (t, &gv) in gs.iter().enumerate() {
                d[i0 * inner + t] += w0 * gv;
                d[i1 * inner + t] += w1 * gv;
            }
        }
    }
    out
}

pub(crate) fn upsample2_forward<T: Real>(x: &[T], shape: Shape) -> (Vec<T>, Shape) {
    let (a, s) = upsample_axis(x, shape, 4);
    let (b, s) = upsample_axis(&a, s, 3);
    upsample_axis(&b, s, 2)
}

pub(crate) fn upsample2_backward<T: Real>(g: &[T], shape: Shape) -> Vec<T> {
    let s4 = shape;
    let mut s3 = s4;
    s3[4] *= 2;
    let mut s2 = s3;
    s2[3] *= 2;
    let a = upsample_axis_adjoint(g, s2, 2);
    let b = upsample_axis_adjoint(&a, s3, 3);
    upsample_axis_adjoint(&b, s4, 4)
}

/// Copies the spatial box `[offset, offset + inner)` of `src` (shape `outer`)
/// into a dense tensor, or scatters it back when `scatter` is set.
pub(crate) fn spatial_box<T: Real>(
    src: &[T],
    outer: Shape,
    offset: [usize; 3],
    inner: [usize; 3],
    dst: &mut [T],
    scatter: bool,
) {
    let [n, c, d, h, w] = outer;
    let [id, ih, iw] = inner;
    for nc in 0..n * c {
        for z in 0..id {
            for y in 0..ih {
                let big = ((nc * d + offset[0] + z) * h + offset[1] + y) * w + offset[2];
                let small = ((nc * id + z) * ih + y) * iw;
                if scatter {
                    // `src` is the small tensor, `dst` the large one.
                    dst[big..big + iw].copy_from_slice(&src[small..small + iw]);
                } else {
                    dst[small..small + iw].copy_from_slice(&src[big..big + iw]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_taps_for_ramp() {
        let (out, shape) = upsample_axis(&[0.0f64, 1.0], [1, 1, 1, 1, 2], 4);
        assert_eq!(shape, [1, 1, 1, 1, 4]);
        assert_eq!(out, [0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        // Direct six-loop convolution as an independent reference.
        let x: Vec<f64> = (0..2 * 3 * 5 * 4 * 6).map(|i| ((i * 37 % 17) as f64) - 8.0).collect();
        let w: Vec<f64> = (0..4 * 3 * 27).map(|i| ((i * 11 % 7) as f64) - 3.0).collect();
        let b = [0.5, -1.0, 2.0, 0.0];
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let g = ConvGeom::new([2, 3, 5, 4, 6], [4, 3, 3, 3, 3], stride, pad).unwrap();
            let out = conv3d_forward(&x, &w, &b, &g);
            let [od, oh, ow] = g.output;
            for n in 0..2 {
                for co in 0..4 {
                    for z in 0..od {
                        for y in 0..oh {
                            for xo in 0..ow {
                                let mut acc = b[co];
                                for ci in 0..3 {
                                    for kd in 0..3 {
                                        for kh in 0..3 {
                                            for kw in 0..3 {
                                                let iz = (z * stride + kd) as isize - pad as isize;
                                                let iy = (y * stride + kh) as isize - pad as isize;
                                                let ix = (xo * stride + kw) as isize - pad as isize;
                                                if iz < 0 || iy < 0 || ix < 0 || iz >= 5 || iy >= 4 || ix >= 6 {
                                                    continue;
                                                }
                                                let xi = (((n * 3 + ci) * 5 + iz as usize) * 4 + iy as usize) * 6 + ix as usize;
                                                acc += w[((co * 3 + ci) * 3 + kd) * 9 + kh * 3 + kw] * x[xi];
                                            }
                                        }
                                    }
                                }
                                let oi = (((n * 4 + co) * od + z) * oh + y) * ow + xo;
                                assert!((out[oi] - acc).abs() < 1e-9, "stride {stride} pad {pad}");
                            }
                        }
                    }
                }
            }
        }
    }
}
