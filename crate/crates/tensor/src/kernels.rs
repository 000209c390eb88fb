//! Raw forward/backward kernels over NCHW slices.
//!
//! These are free functions so the tape can call them without borrowing
//! node storage twice. Shapes are validated by the callers in `tape`.

use crate::scalar::{gemm, Scalar};

/// Geometry of a dense 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvGeom {
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
        }
    }

    /// Output extent along one axis, or `None` if the kernel does not fit.
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Range of output positions `o` whose input index `o * stride + offset`
/// lands inside `[0, input)`.
#[inline]
fn valid_range(offset: isize, stride: usize, input: usize, output: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi_excl = if (input as isize) <= offset {
        0
    } else {
        ((input as isize - 1 - offset) / s + 1).min(output as isize)
    };
    let lo = lo.max(0) as usize;
    let hi = hi_excl.max(0) as usize;
    (lo.min(hi), hi)
}

#[derive(Clone, Copy)]
pub(crate) struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvShape {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self, g: ConvGeom) -> bool {
        self.kh == 1 && self.kw == 1 && g.stride == 1 && g.padding == 0
    }
}

/// Unfolds `x` into columns `[cin*kh*kw, n*ho*wo]`.
fn im2col<T: Scalar>(x: &[T], s: &ConvShape, g: ConvGeom, cols: &mut [T]) {
    let np = s.n * s.p();
    for ci in 0..s.cin {
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = (ci * s.kh + ky) * s.kw + kx;
                let row_buf = &mut cols[row * np..(row + 1) * np];
                let oy_off = (ky * g.dilation) as isize - g.padding as isize;
                let ox_off = (kx * g.dilation) as isize - g.padding as isize;
                let (y_lo, y_hi) = valid_range(oy_off, g.stride, s.h, s.ho);
                let (x_lo, x_hi) = valid_range(ox_off, g.stride, s.w, s.wo);
                for b in 0..s.n {
                    let plane = &x[(b * s.cin + ci) * s.h * s.w..][..s.h * s.w];
                    let dst = &mut row_buf[b * s.p()..(b + 1) * s.p()];
                    for oy in 0..s.ho {
                        let drow = &mut dst[oy * s.wo..(oy + 1) * s.wo];
                        if oy < y_lo || oy >= y_hi {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let iy = (oy as isize * g.stride as isize + oy_off) as usize;
                        let srow = &plane[iy * s.w..(iy + 1) * s.w];
                        drow[..x_lo].iter_mut().for_each(|v| *v = T::zero());
                        drow[x_hi..].iter_mut().for_each(|v| *v = T::zero());
                        if g.stride == 1 && x_lo < x_hi {
                            let start = (x_lo as isize + ox_off) as usize;
                            drow[x_lo..x_hi].copy_from_slice(&srow[start..start + (x_hi - x_lo)]);
                        } else {
                            for ox in x_lo..x_hi {
                                let ix = (ox as isize * g.stride as isize + ox_off) as usize;
                                drow[ox] = srow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds column gradients back onto `dx` (accumulating).
fn col2im<T: Scalar>(cols: &[T], s: &ConvShape, g: ConvGeom, dx: &mut [T]) {
    let np = s.n * s.p();
    for ci in 0..s.cin {
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = (ci * s.kh + ky) * s.kw + kx;
                let row_buf = &cols[row * np..(row + 1) * np];
                let oy_off = (ky * g.dilation) as isize - g.padding as isize;
                let ox_off = (kx * g.dilation) as isize - g.padding as isize;
                let (y_lo, y_hi) = valid_range(oy_off, g.stride, s.h, s.ho);
                let (x_lo, x_hi) = valid_range(ox_off, g.stride, s.w, s.wo);
                for b in 0..s.n {
                    let plane = &mut dx[(b * s.cin + ci) * s.h * s.w..][..s.h * s.w];
                    let src = &row_buf[b * s.p()..(b + 1) * s.p()];
                    for oy in y_lo..y_hi {
                        let iy = (oy as isize * g.stride as isize + oy_off) as usize;
                        let srow = &src[oy * s.wo..(oy + 1) * s.wo];
                        let drow = &mut plane[iy * s.w..(iy + 1) * s.w];
                        if g.stride == 1 {
                            if x_lo >= x_hi {
                                continue;
                            }
                            let start = (x_lo as isize + ox_off) as usize;
                            let d = &mut drow[start..start + (x_hi - x_lo)];
                            for (d, &v) in d.iter_mut().zip(&srow[x_lo..x_hi]) {
                                *d += v;
                            }
                            continue;
                        }
                        for ox in x_lo..x_hi {
                            let ix = (ox as isize * g.stride as isize + ox_off) as usize;
                            drow[ix] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Reorders `[n, c, p]` into `[c, n*p]`.
fn batch_to_channel_major<T: Scalar>(src: &[T], n: usize, c: usize, p: usize, dst: &mut [T]) {
    for b in 0..n {
        for ch in 0..c {
            dst[ch * n * p + b * p..][..p].copy_from_slice(&src[(b * c + ch) * p..][..p]);
        }
    }
}

fn channel_major_to_batch<T: Scalar>(src: &[T], n: usize, c: usize, p: usize, dst: &mut [T]) {
    for b in 0..n {
        for ch in 0..c {
            dst[(b * c + ch) * p..][..p].copy_from_slice(&src[ch * n * p + b * p..][..p]);
        }
    }
}

fn columns<T: Scalar>(x: &[T], s: &ConvShape, g: ConvGeom) -> Vec<T> {
    let mut cols = vec![T::zero(); s.k() * s.n * s.p()];
    if s.is_pointwise(g) {
        batch_to_channel_major(x, s.n, s.cin, s.p(), &mut cols);
    } else {
        im2col(x, s, g, &mut cols);
    }
    cols
}

/// Upper bound on unfolded-column elements per GEMM; larger batches are
/// processed in chunks so the buffer stays cache-sized.
const COLS_BUDGET: usize = 1 << 18;

fn chunk_len(s: &ConvShape) -> usize {
    (COLS_BUDGET / (s.k() * s.p()).max(1)).clamp(1, s.n.max(1))
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, s: &ConvShape, g: ConvGeom) -> Vec<T> {
    let nb = chunk_len(s);
    if nb >= s.n {
        return conv2d_forward_chunk(x, w, bias, s, g);
    }
    let in_len = s.cin * s.h * s.w;
    let out_len = s.cout * s.p();
    let mut out = Vec::with_capacity(s.n * out_len);
    let mut b0 = 0;
    while b0 < s.n {
        let sub = ConvShape {
            n: nb.min(s.n - b0),
            ..*s
        };
        out.extend(conv2d_forward_chunk(
            &x[b0 * in_len..(b0 + sub.n) * in_len],
            w,
            bias,
            &sub,
            g,
        ));
        b0 += sub.n;
    }
    out
}

fn conv2d_forward_chunk<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, s: &ConvShape, g: ConvGeom) -> Vec<T> {
    let np = s.n * s.p();
    let cols = columns(x, s, g);
    let mut tmp = vec![T::zero(); s.cout * np];
    gemm(false, false, s.cout, np, s.k(), w, &cols, T::zero(), &mut tmp);
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            tmp[co * np..(co + 1) * np].iter_mut().for_each(|v| *v += bv);
        }
    }
    let mut out = vec![T::zero(); s.n * s.cout * s.p()];
    channel_major_to_batch(&tmp, s.n, s.cout, s.p(), &mut out);
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    s: &ConvShape,
    g: ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let nb = chunk_len(s);
    if nb >= s.n {
        return conv2d_backward_chunk(x, w, dout, s, g, need);
    }
    let in_len = s.cin * s.h * s.w;
    let out_len = s.cout * s.p();
    let mut dx = need.0.then(|| Vec::with_capacity(s.n * in_len));
    let mut dw: Option<Vec<T>> = None;
    let mut db: Option<Vec<T>> = None;
    let mut b0 = 0;
    while b0 < s.n {
        let sub = ConvShape {
            n: nb.min(s.n - b0),
            ..*s
        };
        let r = conv2d_backward_chunk(
            &x[b0 * in_len..(b0 + sub.n) * in_len],
            w,
            &dout[b0 * out_len..(b0 + sub.n) * out_len],
            &sub,
            g,
            need,
        );
        if let (Some(acc), Some(part)) = (dx.as_mut(), r.dx) {
            acc.extend(part);
        }
        for (acc, part) in [(&mut dw, r.dw), (&mut db, r.db)] {
            if let Some(part) = part {
                match acc {
                    Some(a) => a.iter_mut().zip(&part).for_each(|(a, &p)| *a += p),
                    None => *acc = Some(part),
                }
            }
        }
        b0 += sub.n;
    }
    ConvGrads { dx, dw, db }
}

fn conv2d_backward_chunk<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    s: &ConvShape,
    g: ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let np = s.n * s.p();
    let mut dtmp = vec![T::zero(); s.cout * np];
    batch_to_channel_major(dout, s.n, s.cout, s.p(), &mut dtmp);
    let dw = need.1.then(|| {
        let cols = columns(x, s, g);
        let mut dw = vec![T::zero(); s.cout * s.k()];
        gemm(false, true, s.cout, s.k(), np, &dtmp, &cols, T::zero(), &mut dw);
        dw
    });
    let db = need.2.then(|| {
        (0..s.cout)
            .map(|co| dtmp[co * np..(co + 1) * np].iter().copied().sum())
            .collect()
    });
    let dx = need.0.then(|| {
        let mut dcols = vec![T::zero(); s.k() * np];
        gemm(true, false, s.k(), np, s.cout, w, &dtmp, T::zero(), &mut dcols);
        let mut dx = vec![T::zero(); s.n * s.cin * s.h * s.w];
        if s.is_pointwise(g) {
            channel_major_to_batch(&dcols, s.n, s.cin, s.p(), &mut dx);
        } else {
            col2im(&dcols, s, g, &mut dx);
        }
        dx
    });
    ConvGrads { dx, dw, db }
}

/// Per-channel `k x k` convolution with stride 1 and symmetric padding.
pub(crate) fn depthwise_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    dims: (usize, usize, usize, usize),
    k: usize,
    pad: usize,
) -> Vec<T> {
    let (n, c, h, wd) = dims;
    let ho = h + 2 * pad + 1 - k;
    let wo = wd + 2 * pad + 1 - k;
    let mut out = vec![T::zero(); n * c * ho * wo];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * h * wd..][..h * wd];
            let dst = &mut out[(b * c + ch) * ho * wo..][..ho * wo];
            if let Some(bias) = bias {
                dst.iter_mut().for_each(|v| *v = bias[ch]);
            }
            let kern = &w[ch * k * k..(ch + 1) * k * k];
            for ky in 0..k {
                let yoff = ky as isize - pad as isize;
                let (y_lo, y_hi) = valid_range(yoff, 1, h, ho);
                for kx in 0..k {
                    let wv = kern[ky * k + kx];
                    let xoff = kx as isize - pad as isize;
                    let (x_lo, x_hi) = valid_range(xoff, 1, wd, wo);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for oy in y_lo..y_hi {
                        let iy = (oy as isize + yoff) as usize;
                        let srow = &src[iy * wd + (x_lo as isize + xoff) as usize..][..x_hi - x_lo];
                        let drow = &mut dst[oy * wo + x_lo..oy * wo + x_hi];
                        for (d, &s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    dims: (usize, usize, usize, usize),
    k: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (n, c, h, wd) = dims;
    let ho = h + 2 * pad + 1 - k;
    let wo = wd + 2 * pad + 1 - k;
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let db = need.2.then(|| {
        (0..c)
            .map(|ch| {
                (0..n)
                    .map(|b| dout[(b * c + ch) * ho * wo..][..ho * wo].iter().copied().sum::<T>())
                    .sum()
            })
            .collect()
    });
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * h * wd..][..h * wd];
            let g = &dout[(b * c + ch) * ho * wo..][..ho * wo];
            for ky in 0..k {
                let yoff = ky as isize - pad as isize;
                let (y_lo, y_hi) = valid_range(yoff, 1, h, ho);
                for kx in 0..k {
                    let xoff = kx as isize - pad as isize;
                    let (x_lo, x_hi) = valid_range(xoff, 1, wd, wo);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let wi = ch * k * k + ky * k + kx;
                    let wv = w[wi];
                    let mut acc = T::zero();
                    for oy in y_lo..y_hi {
                        let iy = (oy as isize + yoff) as usize;
                        let base = iy * wd + (x_lo as isize + xoff) as usize;
                        let grow = &g[oy * wo + x_lo..oy * wo + x_hi];
                        if dw.is_some() {
                            let srow = &src[base..base + (x_hi - x_lo)];
                            for (&gv, &sv) in grow.iter().zip(srow) {
                                acc += gv * sv;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let plane = &mut dx[(b * c + ch) * h * wd..][..h * wd];
                            for (d, &gv) in plane[base..base + (x_hi - x_lo)].iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2x2 max pooling with stride 2; returns output and flat argmax indices.
pub(crate) fn max_pool2_forward<T: Scalar>(x: &[T], dims: (usize, usize, usize, usize)) -> (Vec<T>, Vec<u32>) {
    let (n, c, h, w) = dims;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Source indices and weights for 2x bilinear upsampling along one axis
/// (half-pixel centers, edge clamped).
fn upsample_taps(input: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * input)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample2_forward<T: Scalar>(x: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (n, c, h, w) = dims;
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x[plane * h * w..][..h * w];
        let dst = &mut out[plane * ho * wo..][..ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(dout: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (n, c, h, w) = dims;
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let g = &dout[plane * ho * wo..][..ho * wo];
        let dst = &mut dx[plane * h * w..][..h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx);
                let gv = g[oy * wo + ox];
                let top = gv * (T::one() - fy);
                let bot = gv * fy;
                dst[y0 * w + x0] += top * (T::one() - fx);
                dst[y0 * w + x1] += top * fx;
                dst[y1 * w + x0] += bot * (T::one() - fx);
                dst[y1 * w + x1] += bot * fx;
            }
        }
    }
    dx
}
