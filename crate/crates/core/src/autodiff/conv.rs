//! Convolution kernels (im2col + GEMM) and nearest-neighbour upsampling.

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};

/// Border handling along one spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    Zero,
    Reflect,
    /// Wrap-around; used along azimuth where the range image is periodic.
    Circular,
}

impl PadMode {
    #[inline]
    fn map(self, i: isize, n: usize) -> Option<usize> {
        let n_i = n as isize;
        if (0..n_i).contains(&i) {
            return Some(i as usize);
        }
        match self {
            PadMode::Zero => None,
            PadMode::Circular => Some(i.rem_euclid(n_i) as usize),
            PadMode::Reflect => {
                if n == 1 {
                    return Some(0);
                }
                let period = 2 * (n_i - 1);
                let mut j = i.rem_euclid(period);
                if j >= n_i {
                    j = period - j;
                }
                Some(j as usize)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub mode_h: PadMode,
    pub mode_w: PadMode,
}

impl ConvGeom {
    pub fn square(k: usize, stride: usize, pad: usize, mode_h: PadMode, mode_w: PadMode) -> Self {
        Self {
            kh: k,
            kw: k,
            stride,
            pad_h: pad,
            pad_w: pad,
            mode_h,
            mode_w,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.pad_h).saturating_sub(self.kh) / self.stride + 1;
        let wo = (w + 2 * self.pad_w).saturating_sub(self.kw) / self.stride + 1;
        (ho, wo)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    /// Source index for every (kernel offset, output position) pair along one axis.
    fn axis_table(k: usize, out: usize, stride: usize, pad: usize, n: usize, mode: PadMode) -> Vec<Option<usize>> {
        let mut t = Vec::with_capacity(k * out);
        for kk in 0..k {
            for o in 0..out {
                let i = (o * stride + kk) as isize - pad as isize;
                t.push(mode.map(i, n));
            }
        }
        t
    }
}

struct Tables {
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
    /// Per kernel column: output range whose source column needs no padding.
    interior: Vec<(usize, usize)>,
    ho: usize,
    wo: usize,
}

fn tables(g: &ConvGeom, h: usize, w: usize) -> Tables {
    let (ho, wo) = g.out_hw(h, w);
    let interior = (0..g.kw)
        .map(|kx| {
            // ox·stride + kx - pad must land in 0..w
            let lo = g.pad_w.saturating_sub(kx).div_ceil(g.stride).min(wo);
            let hi = match (w + g.pad_w).checked_sub(kx + 1) {
                Some(last) => (last / g.stride + 1).min(wo).max(lo),
                None => lo,
            };
            (lo, hi)
        })
        .collect();
    Tables {
        rows: ConvGeom::axis_table(g.kh, ho, g.stride, g.pad_h, h, g.mode_h),
        cols: ConvGeom::axis_table(g.kw, wo, g.stride, g.pad_w, w, g.mode_w),
        interior,
        ho,
        wo,
    }
}

/// Elements of an im2col tile; keeps the patch matrix cache-resident.
const TILE_ELEMS: usize = 1 << 16;

/// Output channel count below which the input gradient skips GEMM.
const SMALL_CO: usize = 4;

fn rows_per_tile(k: usize, wo: usize, ho: usize) -> usize {
    (TILE_ELEMS / (k * wo).max(1)).clamp(1, ho.max(1))
}

/// Patch matrix `[c·kh·kw, (oy1-oy0)·wo]` for output rows `oy0..oy1`.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, t: &Tables, oy0: usize, oy1: usize, cols: &mut [T]) {
    let p = (oy1 - oy0) * t.wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[r * p..(r + 1) * p];
                let ctab = &t.cols[kx * t.wo..(kx + 1) * t.wo];
                let (lo, hi) = t.interior[kx];
                for oy in oy0..oy1 {
                    let row = &mut dst[(oy - oy0) * t.wo..(oy - oy0 + 1) * t.wo];
                    match t.rows[ky * t.ho + oy] {
                        None => row.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * w..(iy + 1) * w];
                            if hi > lo {
                                let off = lo * g.stride + kx - g.pad_w;
                                if g.stride == 1 {
                                    row[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                                } else {
                                    for (v, s) in row[lo..hi].iter_mut().zip(src[off..].iter().step_by(g.stride)) {
                                        *v = *s;
                                    }
                                }
                            }
                            for o in (0..lo).chain(hi..t.wo) {
                                row[o] = match ctab[o] {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, t: &Tables, oy0: usize, oy1: usize, dx: &mut [T]) {
    let p = (oy1 - oy0) * t.wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[r * p..(r + 1) * p];
                let ctab = &t.cols[kx * t.wo..(kx + 1) * t.wo];
                let (lo, hi) = t.interior[kx];
                for oy in oy0..oy1 {
                    let Some(iy) = t.rows[ky * t.ho + oy] else {
                        continue;
                    };
                    let row = &src[(oy - oy0) * t.wo..(oy - oy0 + 1) * t.wo];
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    if hi > lo {
                        let off = lo * g.stride + kx - g.pad_w;
                        if g.stride == 1 {
                            for (d, v) in dst[off..off + hi - lo].iter_mut().zip(&row[lo..hi]) {
                                *d = *d + *v;
                            }
                        } else {
                            for (d, v) in dst[off..].iter_mut().step_by(g.stride).zip(&row[lo..hi]) {
                                *d = *d + *v;
                            }
                        }
                    }
                    for o in (0..lo).chain(hi..t.wo) {
                        if let Some(ix) = ctab[o] {
                            dst[ix] = dst[ix] + row[o];
                        }
                    }
                }
            }
        }
    }
}

/// Source row `iy` gathered at the output columns of kernel column `kx`.
#[inline]
fn gather_row<T: Scalar>(src: &[T], g: &ConvGeom, t: &Tables, kx: usize, buf: &mut [T]) {
    let ctab = &t.cols[kx * t.wo..(kx + 1) * t.wo];
    let (lo, hi) = t.interior[kx];
    if hi > lo {
        let off = lo * g.stride + kx - g.pad_w;
        if g.stride == 1 {
            buf[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
        } else {
            for (v, s) in buf[lo..hi].iter_mut().zip(src[off..].iter().step_by(g.stride)) {
                *v = *s;
            }
        }
    }
    for o in (0..lo).chain(hi..t.wo) {
        buf[o] = match ctab[o] {
            Some(ix) => src[ix],
            None => T::zero(),
        };
    }
}

/// Dot product with eight independent partial sums so it vectorizes.
#[inline]
fn dot8<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    acc.iter().fold(tail, |s, v| s + *v)
}

/// Forward pass for few output channels: one row of patches at a time.
fn forward_small<T: Scalar>(xs: &[T], weight: &[T], co: usize, c: usize, h: usize, w: usize, g: &ConvGeom, t: &Tables, os: &mut [T]) {
    let p = t.ho * t.wo;
    let k = c * g.kh * g.kw;
    let mut buf = vec![T::zero(); t.wo];
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for oy in 0..t.ho {
                let Some(iy) = t.rows[ky * t.ho + oy] else {
                    continue;
                };
                let src = &plane[iy * w..(iy + 1) * w];
                for kx in 0..g.kw {
                    gather_row(src, g, t, kx, &mut buf);
                    let r = (ci * g.kh + ky) * g.kw + kx;
                    for o in 0..co {
                        let wv = weight[o * k + r];
                        let dst = &mut os[o * p + oy * t.wo..o * p + (oy + 1) * t.wo];
                        for (d, v) in dst.iter_mut().zip(&buf) {
                            *d = *d + wv * *v;
                        }
                    }
                }
            }
        }
    }
}

/// Weight gradient for few output channels without a patch matrix.
fn weight_grad_small<T: Scalar>(xs: &[T], gs: &[T], co: usize, c: usize, h: usize, w: usize, g: &ConvGeom, t: &Tables, dw: &mut [T]) {
    let p = t.ho * t.wo;
    let k = c * g.kh * g.kw;
    let mut buf = vec![T::zero(); t.wo];
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for oy in 0..t.ho {
                let Some(iy) = t.rows[ky * t.ho + oy] else {
                    continue;
                };
                let src = &plane[iy * w..(iy + 1) * w];
                for kx in 0..g.kw {
                    gather_row(src, g, t, kx, &mut buf);
                    let r = (ci * g.kh + ky) * g.kw + kx;
                    for o in 0..co {
                        let grow = &gs[o * p + oy * t.wo..o * p + (oy + 1) * t.wo];
                        let dot = dot8(grow, &buf);
                        dw[o * k + r] = dw[o * k + r] + dot;
                    }
                }
            }
        }
    }
}

/// `dx += conv^T(dOut)` for output rows `oy0..oy1` without a patch matrix;
/// cheaper than GEMM + col2im when there are only a few output channels.
#[allow(clippy::too_many_arguments)]
fn scatter_small<T: Scalar>(weight: &[T], gs: &[T], co: usize, c: usize, h: usize, w: usize, g: &ConvGeom, t: &Tables, oy0: usize, oy1: usize, dx: &mut [T]) {
    let p = t.ho * t.wo;
    let k = c * g.kh * g.kw;
    let mut acc = vec![T::zero(); t.wo];
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let ctab = &t.cols[kx * t.wo..(kx + 1) * t.wo];
                let (lo, hi) = t.interior[kx];
                for oy in oy0..oy1 {
                    let Some(iy) = t.rows[ky * t.ho + oy] else {
                        continue;
                    };
                    acc.iter_mut().for_each(|v| *v = T::zero());
                    for o in 0..co {
                        let wv = weight[o * k + r];
                        let grow = &gs[o * p + oy * t.wo..o * p + (oy + 1) * t.wo];
                        for (a, gv) in acc.iter_mut().zip(grow) {
                            *a = *a + wv * *gv;
                        }
                    }
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    if hi > lo {
                        let off = lo * g.stride + kx - g.pad_w;
                        if g.stride == 1 {
                            for (d, v) in dst[off..off + hi - lo].iter_mut().zip(&acc[lo..hi]) {
                                *d = *d + *v;
                            }
                        } else {
                            for (d, v) in dst[off..].iter_mut().step_by(g.stride).zip(&acc[lo..hi]) {
                                *d = *d + *v;
                            }
                        }
                    }
                    for o in (0..lo).chain(hi..t.wo) {
                        if let Some(ix) = ctab[o] {
                            dst[ix] = dst[ix] + acc[o];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [N, Ci, H, W]`, `weight: [Co, Ci, kh, kw]`, `bias: [Co]`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, g: &ConvGeom) -> Tensor<T> {
    let (n, ci, h, w) = x.dims4();
    let (co, wci, kh, kw) = weight.dims4();
    assert_eq!(ci, wci, "conv2d: input has {ci} channels, weight expects {wci}");
    assert_eq!((kh, kw), (g.kh, g.kw), "conv2d: kernel size mismatch");
    let t = tables(g, h, w);
    let p = t.ho * t.wo;
    let k = ci * kh * kw;
    let mut out = vec![T::zero(); n * co * p];
    let rt = rows_per_tile(k, t.wo, t.ho);
    let small = co <= SMALL_CO && !g.is_pointwise();
    let mut cols = if g.is_pointwise() || small { Vec::new() } else { vec![T::zero(); k * rt * t.wo] };
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    for s in 0..n {
        let xs = &x.data()[s * ci * h * w..(s + 1) * ci * h * w];
        let os = &mut out[s * co * p..(s + 1) * co * p];
        if let Some(b) = bias {
            for (o, &bv) in b.data().iter().enumerate() {
                os[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = bv);
            }
        }
        if g.is_pointwise() {
            T::gemm(co, k, p, T::one(), weight.data(), k as isize, 1, xs, p as isize, 1, beta, os, p as isize, 1);
            continue;
        }
        if small {
            forward_small(xs, weight.data(), co, ci, h, w, g, &t, os);
            continue;
        }
        for oy0 in (0..t.ho).step_by(rt) {
            let oy1 = (oy0 + rt).min(t.ho);
            let pt = (oy1 - oy0) * t.wo;
            im2col(xs, ci, h, w, g, &t, oy0, oy1, &mut cols);
            let dst = &mut os[oy0 * t.wo..];
            T::gemm(co, k, pt, T::one(), weight.data(), k as isize, 1, &cols, pt as isize, 1, beta, dst, p as isize, 1);
        }
    }
    Tensor::new(vec![n, co, t.ho, t.wo], out)
}

/// Gradients of a convolution: `(dx, dweight, dbias)`; `dx` only when requested.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, ci, h, w) = x.dims4();
    let (co, _, kh, kw) = weight.dims4();
    let t = tables(g, h, w);
    let p = t.ho * t.wo;
    let k = ci * kh * kw;
    let mut dw = vec![T::zero(); co * k];
    let mut db = vec![T::zero(); co];
    let mut dx = if need_dx { vec![T::zero(); n * ci * h * w] } else { Vec::new() };
    let rt = rows_per_tile(k, t.wo, t.ho);
    let tile = k * rt * t.wo;
    let small = co <= SMALL_CO;
    let mut cols = if g.is_pointwise() || small { Vec::new() } else { vec![T::zero(); tile] };
    let mut dcols = if need_dx && !g.is_pointwise() && !small { vec![T::zero(); tile] } else { Vec::new() };
    for s in 0..n {
        let xs = &x.data()[s * ci * h * w..(s + 1) * ci * h * w];
        let gs = &grad_out.data()[s * co * p..(s + 1) * co * p];
        for (o, d) in db.iter_mut().enumerate() {
            *d = *d + gs[o * p..(o + 1) * p].iter().copied().sum();
        }
        if g.is_pointwise() {
            T::gemm(co, p, k, T::one(), gs, p as isize, 1, xs, 1, p as isize, T::one(), &mut dw, k as isize, 1);
            if need_dx {
                let dxs = &mut dx[s * ci * h * w..(s + 1) * ci * h * w];
                T::gemm(k, co, p, T::one(), weight.data(), 1, k as isize, gs, p as isize, 1, T::zero(), dxs, p as isize, 1);
            }
            continue;
        }
        if small {
            weight_grad_small(xs, gs, co, ci, h, w, g, &t, &mut dw);
            if need_dx {
                let dxs = &mut dx[s * ci * h * w..(s + 1) * ci * h * w];
                scatter_small(weight.data(), gs, co, ci, h, w, g, &t, 0, t.ho, dxs);
            }
            continue;
        }
        for oy0 in (0..t.ho).step_by(rt) {
            let oy1 = (oy0 + rt).min(t.ho);
            let pt = (oy1 - oy0) * t.wo;
            let gt = &gs[oy0 * t.wo..];
            im2col(xs, ci, h, w, g, &t, oy0, oy1, &mut cols);
            // dW[co, k] += dOut[co, pt] · cols[k, pt]^T
            T::gemm(co, pt, k, T::one(), gt, p as isize, 1, &cols, 1, pt as isize, T::one(), &mut dw, k as isize, 1);
            if need_dx {
                let dxs = &mut dx[s * ci * h * w..(s + 1) * ci * h * w];
                T::gemm(k, co, pt, T::one(), weight.data(), 1, k as isize, gt, p as isize, 1, T::zero(), &mut dcols, pt as isize, 1);
                col2im(&dcols, ci, h, w, g, &t, oy0, oy1, dxs);
            }
        }
    }
    (
        need_dx.then(|| Tensor::new(vec![n, ci, h, w], dx)),
        Tensor::new(weight.shape().to_vec(), dw),
        Tensor::new(vec![co], db),
    )
}

pub fn upsample2x_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![n, c, h2, w2], out)
}

pub fn upsample2x_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = grad_out.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out.data()[plane * h2 * w2..(plane + 1) * h2 * w2];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                let d = &mut dst[(y / 2) * w + xx / 2];
                *d = *d + src[y * w2 + xx];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx)
}
