//! Raw loops behind the spatial ops. Layouts are NCHW, row-major.

use super::scalar::{gemm, MatRef};
use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let ph = height + 2 * pad;
        let pw = width + 2 * pad;
        if stride == 0 || kh > ph || kw > pw {
            return None;
        }
        Some(ConvGeom {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1x1, stride 1, no padding: the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one image `[C, H, W]` into `[C*kh*kw, out_h*out_w]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let ol = g.out_len();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let dst = &mut col[row * ol..(row + 1) * ol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[C, H, W]`.
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let ol = g.out_len();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let src = &col[row * ol..(row + 1) * ol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out[b] = W * col(x[b]) (+ bias)`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    w: &[T],
    out_ch: usize,
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let ol = g.out_len();
    let pl = g.patch_len();
    let mut out = vec![T::zero(); batch * out_ch * ol];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); pl * ol] };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        let ob = &mut out[b * out_ch * ol..(b + 1) * out_ch * ol];
        if let Some(bias) = bias {
            for (o, chunk) in ob.chunks_mut(ol).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[o]);
            }
        }
        gemm(MatRef::new(w, out_ch, pl), MatRef::new(cols, pl, ol), T::one(), ob);
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input (if requested), kernel and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    w: &[T],
    out_ch: usize,
    g: &ConvGeom,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let in_len = g.channels * g.height * g.width;
    let ol = g.out_len();
    let pl = g.patch_len();
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); pl * ol] };
    let mut dcol = vec![T::zero(); if g.is_pointwise() { 0 } else { pl * ol }];
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let db = &dout[b * out_ch * ol..(b + 1) * out_ch * ol];
        if let Some(dbias) = dbias.as_deref_mut() {
            for (o, chunk) in db.chunks(ol).enumerate() {
                dbias[o] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let cols: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut col);
                &col
            };
            gemm(MatRef::new(db, out_ch, ol), MatRef::t(cols, pl, ol), T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(MatRef::t(w, out_ch, pl), MatRef::new(db, out_ch, ol), T::one(), dxb);
            } else {
                gemm(MatRef::t(w, out_ch, pl), MatRef::new(db, out_ch, ol), T::zero(), &mut dcol);
                col2im(&dcol, g, dxb);
            }
        }
    }
}

/// Max pooling with implicit `-inf` padding. Returns values and the flat
/// input index each output was taken from.
pub fn max_pool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    g: &ConvGeom,
) -> (Vec<T>, Vec<usize>) {
    let hw = g.height * g.width;
    let ol = g.out_len();
    let mut out = vec![T::zero(); planes * ol];
    let mut arg = vec![0usize; planes * ol];
    for p in 0..planes {
        let plane = &x[p * hw..(p + 1) * hw];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for i in 0..g.kh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for j in 0..g.kw {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let fi = iy as usize * g.width + ix as usize;
                        if plane[fi] > best || best_i == usize::MAX {
                            best = plane[fi];
                            best_i = fi;
                        }
                    }
                }
                let o = p * ol + oy * g.out_w + ox;
                out[o] = best;
                arg[o] = p * hw + best_i;
            }
        }
    }
    (out, arg)
}

/// Windows of a 2x2 stride-2 ceil-mode pool over one `[H, W]` plane.
pub fn pool2_extent(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(2), w.div_ceil(2))
}

/// Mask-aware 2x2/2 average pool: each output averages the valid cells of its
/// window (zero when none are valid). `mask` is per-plane-group `[B, H, W]`.
pub fn avg_pool2_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    mask: Option<&[bool]>,
) -> Vec<T> {
    let (oh, ow) = pool2_extent(h, w);
    let mut out = vec![T::zero(); batch * channels * oh * ow];
    for b in 0..batch {
        let m = mask.map(|m| &m[b * h * w..(b + 1) * h * w]);
        let counts = window_counts(h, w, m);
        for c in 0..channels {
            let plane = &x[(b * channels + c) * h * w..(b * channels + c + 1) * h * w];
            let dst = &mut out[(b * channels + c) * oh * ow..(b * channels + c + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let n = counts[oy * ow + ox];
                    if n == 0 {
                        continue;
                    }
                    let mut s = T::zero();
                    for iy in 2 * oy..(2 * oy + 2).min(h) {
                        for ix in 2 * ox..(2 * ox + 2).min(w) {
                            if m.is_none_or(|m| m[iy * w + ix]) {
                                s += plane[iy * w + ix];
                            }
                        }
                    }
                    dst[oy * ow + ox] = s / T::lit(n as f64);
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(
    dout: &[T],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    mask: Option<&[bool]>,
    dx: &mut [T],
) {
    let (oh, ow) = pool2_extent(h, w);
    for b in 0..batch {
        let m = mask.map(|m| &m[b * h * w..(b + 1) * h * w]);
        let counts = window_counts(h, w, m);
        for c in 0..channels {
            let src = &dout[(b * channels + c) * oh * ow..(b * channels + c + 1) * oh * ow];
            let plane = &mut dx[(b * channels + c) * h * w..(b * channels + c + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let n = counts[oy * ow + ox];
                    if n == 0 {
                        continue;
                    }
                    let gv = src[oy * ow + ox] / T::lit(n as f64);
                    for iy in 2 * oy..(2 * oy + 2).min(h) {
                        for ix in 2 * ox..(2 * ox + 2).min(w) {
                            if m.is_none_or(|m| m[iy * w + ix]) {
                                plane[iy * w + ix] += gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn window_counts(h: usize, w: usize, mask: Option<&[bool]>) -> Vec<usize> {
    let (oh, ow) = pool2_extent(h, w);
    let mut counts = vec![0usize; oh * ow];
    for iy in 0..h {
        for ix in 0..w {
            if mask.is_none_or(|m| m[iy * w + ix]) {
                counts[(iy / 2) * ow + ix / 2] += 1;
            }
        }
    }
    counts
}
