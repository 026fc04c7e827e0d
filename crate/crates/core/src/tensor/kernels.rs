//! Slice-level forward and backward kernels behind the tape operations.
//!
//! All images are C×H×W, row-major. Accumulators are `f64`.

use crate::error::{Error, Result};
use crate::par;

use super::Real;

/// Geometry of a dense 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        (c_in, h, w): (usize, usize, usize),
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::shape(
                "conv2d",
                format!("kernel size {k} must be odd"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("conv2d", "empty spatial extent"));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::shape(
                "conv2d",
                format!("{h}×{w} input with padding {padding} is smaller than a {k}×{k} kernel"),
            ));
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            oh,
            ow,
        })
    }
}

/// Output indices `o` in `[lo, hi)` for which `o*stride + tap - pad` lands inside `0..n_in`.
#[inline]
fn valid_range(n_in: usize, n_out: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    let off = tap as isize - pad as isize;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let max_in = n_in as isize - 1 - off;
    if max_in < 0 {
        return (0, 0);
    }
    let hi = (max_in as usize / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

pub fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let ConvGeom {
        c_in,
        h,
        w,
        k,
        stride,
        padding,
        oh,
        ow,
        ..
    } = *g;
    let mut out = vec![T::zero(); g.c_out * oh * ow];
    par::for_each_chunk_mut(&mut out, oh * ow, |o, out_o| {
        let mut acc = vec![bias.map_or(0.0, |b| b[o].f64()); oh * ow];
        for c in 0..c_in {
            let in_c = &input[c * h * w..(c + 1) * h * w];
            for p in 0..k {
                let (ylo, yhi) = valid_range(h, oh, p, stride, padding);
                for q in 0..k {
                    let wv = weight[((o * c_in + c) * k + p) * k + q].f64();
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = valid_range(w, ow, q, stride, padding);
                    for oy in ylo..yhi {
                        let iy = oy * stride + p - padding;
                        let row = &in_c[iy * w..(iy + 1) * w];
                        let acc_row = &mut acc[oy * ow + xlo..oy * ow + xhi];
                        if stride == 1 {
                            let ix0 = xlo + q - padding;
                            for (a, x) in acc_row.iter_mut().zip(&row[ix0..ix0 + (xhi - xlo)]) {
                                *a += wv * x.f64();
                            }
                        } else {
                            for (a, ox) in acc_row.iter_mut().zip(xlo..xhi) {
                                *a += wv * row[ox * stride + q - padding].f64();
                            }
                        }
                    }
                }
            }
        }
        for (o, a) in out_o.iter_mut().zip(&acc) {
            *o = T::of(*a);
        }
    });
    out
}

pub fn conv2d_backward_input<T: Real>(g: &ConvGeom, weight: &[T], grad_out: &[T]) -> Vec<T> {
    let ConvGeom {
        c_in,
        h,
        w,
        c_out,
        k,
        stride,
        padding,
        oh,
        ow,
    } = *g;
    let mut grad_in = vec![T::zero(); c_in * h * w];
    par::for_each_chunk_mut(&mut grad_in, h * w, |c, gin_c| {
        let mut acc = vec![0.0f64; h * w];
        for o in 0..c_out {
            let g_o = &grad_out[o * oh * ow..(o + 1) * oh * ow];
            for p in 0..k {
                let (ylo, yhi) = valid_range(h, oh, p, stride, padding);
                for q in 0..k {
                    let wv = weight[((o * c_in + c) * k + p) * k + q].f64();
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = valid_range(w, ow, q, stride, padding);
                    for oy in ylo..yhi {
                        let iy = oy * stride + p - padding;
                        let g_row = &g_o[oy * ow + xlo..oy * ow + xhi];
                        if stride == 1 {
                            let ix0 = xlo + q - padding;
                            let acc_row = &mut acc[iy * w + ix0..iy * w + ix0 + (xhi - xlo)];
                            for (a, gv) in acc_row.iter_mut().zip(g_row) {
                                *a += wv * gv.f64();
                            }
                        } else {
                            for (gv, ox) in g_row.iter().zip(xlo..xhi) {
                                acc[iy * w + ox * stride + q - padding] += wv * gv.f64();
                            }
                        }
                    }
                }
            }
        }
        for (d, a) in gin_c.iter_mut().zip(&acc) {
            *d = T::of(*a);
        }
    });
    grad_in
}

pub fn conv2d_backward_weight<T: Real>(g: &ConvGeom, input: &[T], grad_out: &[T]) -> Vec<T> {
    let ConvGeom {
        c_in,
        h,
        w,
        c_out,
        k,
        stride,
        padding,
        oh,
        ow,
    } = *g;
    let mut grad_w = vec![T::zero(); c_out * c_in * k * k];
    par::for_each_chunk_mut(&mut grad_w, c_in * k * k, |o, gw_o| {
        let g_o = &grad_out[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..c_in {
            let in_c = &input[c * h * w..(c + 1) * h * w];
            for p in 0..k {
                let (ylo, yhi) = valid_range(h, oh, p, stride, padding);
                for q in 0..k {
                    let (xlo, xhi) = valid_range(w, ow, q, stride, padding);
                    let mut acc = 0.0f64;
                    for oy in ylo..yhi {
                        let iy = oy * stride + p - padding;
                        let row = &in_c[iy * w..(iy + 1) * w];
                        let g_row = &g_o[oy * ow + xlo..oy * ow + xhi];
                        if stride == 1 {
                            let ix0 = xlo + q - padding;
                            for (gv, x) in g_row.iter().zip(&row[ix0..ix0 + (xhi - xlo)]) {
                                acc += gv.f64() * x.f64();
                            }
                        } else {
                            for (gv, ox) in g_row.iter().zip(xlo..xhi) {
                                acc += gv.f64() * row[ox * stride + q - padding].f64();
                            }
                        }
                    }
                    gw_o[(c * k + p) * k + q] = T::of(acc);
                }
            }
        }
    });
    grad_w
}

/// Sum of each channel plane; the bias gradient of a convolution.
pub fn channel_sums<T: Real>(c: usize, plane: usize, grad_out: &[T]) -> Vec<T> {
    (0..c)
        .map(|o| {
            T::of(
                grad_out[o * plane..(o + 1) * plane]
                    .iter()
                    .map(|v| v.f64())
                    .sum(),
            )
        })
        .collect()
}

/// Per-channel ("depthwise") k×k convolution, stride 1, zero padding k/2.
/// `kernel` is C×k×k.
pub fn depthwise_forward<T: Real>(
    (c, h, w): (usize, usize, usize),
    k: usize,
    input: &[T],
    kernel: &[T],
) -> Vec<T> {
    let r = k / 2;
    let mut out = vec![T::zero(); c * h * w];
    par::for_each_chunk_mut(&mut out, h * w, |ch, out_c| {
        let in_c = &input[ch * h * w..(ch + 1) * h * w];
        let mut acc = vec![0.0f64; h * w];
        for p in 0..k {
            let (ylo, yhi) = valid_range(h, h, p, 1, r);
            for q in 0..k {
                let kv = kernel[(ch * k + p) * k + q].f64();
                if kv == 0.0 {
                    continue;
                }
                let (xlo, xhi) = valid_range(w, w, q, 1, r);
                for y in ylo..yhi {
                    let iy = y + p - r;
                    let ix0 = xlo + q - r;
                    let src = &in_c[iy * w + ix0..iy * w + ix0 + (xhi - xlo)];
                    for (a, x) in acc[y * w + xlo..y * w + xhi].iter_mut().zip(src) {
                        *a += kv * x.f64();
                    }
                }
            }
        }
        for (o, a) in out_c.iter_mut().zip(&acc) {
            *o = T::of(*a);
        }
    });
    out
}

pub fn depthwise_backward_input<T: Real>(
    (c, h, w): (usize, usize, usize),
    k: usize,
    kernel: &[T],
    grad_out: &[T],
) -> Vec<T> {
    let r = k / 2;
    let mut grad_in = vec![T::zero(); c * h * w];
    par::for_each_chunk_mut(&mut grad_in, h * w, |ch, gin_c| {
        let g_c = &grad_out[ch * h * w..(ch + 1) * h * w];
        let mut acc = vec![0.0f64; h * w];
        for p in 0..k {
            let (ylo, yhi) = valid_range(h, h, p, 1, r);
            for q in 0..k {
                let kv = kernel[(ch * k + p) * k + q].f64();
                if kv == 0.0 {
                    continue;
                }
                let (xlo, xhi) = valid_range(w, w, q, 1, r);
                for y in ylo..yhi {
                    let iy = y + p - r;
                    let ix0 = xlo + q - r;
                    let dst = &mut acc[iy * w + ix0..iy * w + ix0 + (xhi - xlo)];
                    for (a, gv) in dst.iter_mut().zip(&g_c[y * w + xlo..y * w + xhi]) {
                        *a += kv * gv.f64();
                    }
                }
            }
        }
        for (d, a) in gin_c.iter_mut().zip(&acc) {
            *d = T::of(*a);
        }
    });
    grad_in
}

pub fn depthwise_backward_kernel<T: Real>(
    (c, h, w): (usize, usize, usize),
    k: usize,
    input: &[T],
    grad_out: &[T],
) -> Vec<T> {
    let r = k / 2;
    let mut grad_k = vec![T::zero(); c * k * k];
    par::for_each_chunk_mut(&mut grad_k, k * k, |ch, gk| {
        let in_c = &input[ch * h * w..(ch + 1) * h * w];
        let g_c = &grad_out[ch * h * w..(ch + 1) * h * w];
        for p in 0..k {
            let (ylo, yhi) = valid_range(h, h, p, 1, r);
            for q in 0..k {
                let (xlo, xhi) = valid_range(w, w, q, 1, r);
                let mut acc = 0.0f64;
                for y in ylo..yhi {
                    let iy = y + p - r;
                    let ix0 = xlo + q - r;
                    let src = &in_c[iy * w + ix0..iy * w + ix0 + (xhi - xlo)];
                    for (gv, x) in g_c[y * w + xlo..y * w + xhi].iter().zip(src) {
                        acc += gv.f64() * x.f64();
                    }
                }
                gk[p * k + q] = T::of(acc);
            }
        }
    });
    grad_k
}

/// `out[c, i, j] = input[c, i + dx, j + dy]`, zero outside.
pub fn shift<T: Real>(
    (c, h, w): (usize, usize, usize),
    input: &[T],
    dx: isize,
    dy: isize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c * h * w];
    par::for_each_chunk_mut(&mut out, h * w, |ch, out_c| {
        let in_c = &input[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            let si = i as isize + dx;
            if si < 0 || si >= h as isize {
                continue;
            }
            let si = si as usize;
            for j in 0..w {
                let sj = j as isize + dy;
                if sj >= 0 && sj < w as isize {
                    out_c[i * w + j] = in_c[si * w + sj as usize];
                }
            }
        }
    });
    out
}

/// Interpolation taps for one axis of an align-corners-false bilinear resize.
fn bilinear_taps(n_in: usize, scale: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..n_in * scale)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub fn upsample_forward<T: Real>(
    (c, h, w): (usize, usize, usize),
    scale: usize,
    input: &[T],
) -> Vec<T> {
    let (oh, ow) = (h * scale, w * scale);
    let ty = bilinear_taps(h, scale);
    let tx = bilinear_taps(w, scale);
    let mut out = vec![T::zero(); c * oh * ow];
    par::for_each_chunk_mut(&mut out, oh * ow, |ch, out_c| {
        let in_c = &input[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let top = wx0 * in_c[y0 * w + x0].f64() + wx1 * in_c[y0 * w + x1].f64();
                let bot = wx0 * in_c[y1 * w + x0].f64() + wx1 * in_c[y1 * w + x1].f64();
                out_c[oy * ow + ox] = T::of(wy0 * top + wy1 * bot);
            }
        }
    });
    out
}

pub fn upsample_backward<T: Real>(
    (c, h, w): (usize, usize, usize),
    scale: usize,
    grad_out: &[T],
) -> Vec<T> {
    let (oh, ow) = (h * scale, w * scale);
    let ty = bilinear_taps(h, scale);
    let tx = bilinear_taps(w, scale);
    let mut grad_in = vec![T::zero(); c * h * w];
    par::for_each_chunk_mut(&mut grad_in, h * w, |ch, gin_c| {
        let g_c = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let mut acc = vec![0.0f64; h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = g_c[oy * ow + ox].f64();
                acc[y0 * w + x0] += g * wy0 * wx0;
                acc[y0 * w + x1] += g * wy0 * wx1;
                acc[y1 * w + x0] += g * wy1 * wx0;
                acc[y1 * w + x1] += g * wy1 * wx1;
            }
        }
        for (d, a) in gin_c.iter_mut().zip(&acc) {
            *d = T::of(*a);
        }
    });
    grad_in
}

/// `(outer, len, inner)` strides for reducing along `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward<T: Real>(shape: &[usize], axis: usize, input: &[T]) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); input.len()];
    let mut buf = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + i;
            let max = (0..len)
                .map(|t| input[idx(t)].f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (t, b) in buf.iter_mut().enumerate() {
                *b = (input[idx(t)].f64() - max).exp();
                sum += *b;
            }
            for (t, b) in buf.iter().enumerate() {
                out[idx(t)] = T::of(b / sum);
            }
        }
    }
    out
}

pub fn softmax_backward<T: Real>(shape: &[usize], axis: usize, y: &[T], grad_out: &[T]) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut grad_in = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + i;
            let dot: f64 = (0..len)
                .map(|t| y[idx(t)].f64() * grad_out[idx(t)].f64())
                .sum();
            for t in 0..len {
                grad_in[idx(t)] = T::of(y[idx(t)].f64() * (grad_out[idx(t)].f64() - dot));
            }
        }
    }
    grad_in
}

/// C×H×W → (H·W)×C.
fn to_pixel_major<T: Real>((c, h, w): (usize, usize, usize), x: &[T]) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; hw * c];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = x[ch * hw + p].f64();
        }
    }
    out
}

/// (H·W)×C → C×H×W.
fn to_channel_major<T: Real>((c, h, w): (usize, usize, usize), x: &[f64]) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    for ch in 0..c {
        for p in 0..hw {
            out[ch * hw + p] = T::of(x[p * c + ch]);
        }
    }
    out
}

/// Geometry of windowed multi-head attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub heads: usize,
    pub radius: usize,
}

impl AttentionGeom {
    pub fn head_dim(&self) -> usize {
        self.c / self.heads
    }

    /// Side of the square window, `2·radius + 1`.
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn window(&self) -> usize {
        self.side() * self.side()
    }

    /// Clipped window rows/cols around `(i, j)`, inclusive bounds.
    #[inline]
    fn bounds(&self, i: usize, j: usize) -> (usize, usize, usize, usize) {
        let r = self.radius;
        (
            i.saturating_sub(r),
            (i + r).min(self.h - 1),
            j.saturating_sub(r),
            (j + r).min(self.w - 1),
        )
    }

    /// Slot of neighbor `(a, b)` in the window of `(i, j)`.
    #[inline]
    fn slot(&self, i: usize, j: usize, a: usize, b: usize) -> usize {
        let r = self.radius as isize;
        let row = a as isize - i as isize + r;
        let col = b as isize - j as isize + r;
        row as usize * self.side() + col as usize
    }
}

/// Saved state of a windowed attention forward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    /// `[pixel][head][slot]`, zero at clipped-out slots.
    pub weights: Vec<f64>,
}

/// For each pixel and head: softmax over the clipped window of `q·k/√d`,
/// then the weighted sum of `v`. Heads occupy consecutive channel groups.
pub fn attention_forward<T: Real>(
    g: &AttentionGeom,
    q: &[T],
    k: &[T],
    v: &[T],
) -> (Vec<T>, AttentionCache) {
    let AttentionGeom { c, h, w, heads, .. } = *g;
    let d = g.head_dim();
    let win = g.window();
    let scale = 1.0 / (d as f64).sqrt();
    let qt = to_pixel_major((c, h, w), q);
    let kt = to_pixel_major((c, h, w), k);
    let vt = to_pixel_major((c, h, w), v);

    let rows: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(h, |i| {
        let mut out = vec![0.0; w * c];
        let mut wts = vec![0.0; w * heads * win];
        let mut logits = vec![0.0; win];
        for j in 0..w {
            let p = i * w + j;
            let (a0, a1, b0, b1) = g.bounds(i, j);
            for l in 0..heads {
                let qv = &qt[p * c + l * d..p * c + (l + 1) * d];
                let mut max = f64::NEG_INFINITY;
                for a in a0..=a1 {
                    for b in b0..=b1 {
                        let kv = &kt[(a * w + b) * c + l * d..(a * w + b) * c + (l + 1) * d];
                        let s = qv.iter().zip(kv).map(|(x, y)| x * y).sum::<f64>() * scale;
                        logits[g.slot(i, j, a, b)] = s;
                        max = max.max(s);
                    }
                }
                let wrow = &mut wts[(j * heads + l) * win..(j * heads + l + 1) * win];
                let mut sum = 0.0;
                for a in a0..=a1 {
                    for b in b0..=b1 {
                        let s = g.slot(i, j, a, b);
                        wrow[s] = (logits[s] - max).exp();
                        sum += wrow[s];
                    }
                }
                let orow = &mut out[j * c + l * d..j * c + (l + 1) * d];
                for a in a0..=a1 {
                    for b in b0..=b1 {
                        let s = g.slot(i, j, a, b);
                        wrow[s] /= sum;
                        let wt = wrow[s];
                        let vv = &vt[(a * w + b) * c + l * d..(a * w + b) * c + (l + 1) * d];
                        for (o, x) in orow.iter_mut().zip(vv) {
                            *o += wt * x;
                        }
                    }
                }
            }
        }
        (out, wts)
    });

    let mut out_t = Vec::with_capacity(h * w * c);
    let mut weights = Vec::with_capacity(h * w * heads * win);
    for (o, wt) in rows {
        out_t.extend(o);
        weights.extend(wt);
    }
    (
        to_channel_major((c, h, w), &out_t),
        AttentionCache { weights },
    )
}

/// Gradients `(dq, dk, dv)` of windowed attention.
pub fn attention_backward<T: Real>(
    g: &AttentionGeom,
    q: &[T],
    k: &[T],
    v: &[T],
    cache: &AttentionCache,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttentionGeom { c, h, w, heads, .. } = *g;
    let d = g.head_dim();
    let win = g.window();
    let scale = 1.0 / (d as f64).sqrt();
    let qt = to_pixel_major((c, h, w), q);
    let kt = to_pixel_major((c, h, w), k);
    let vt = to_pixel_major((c, h, w), v);
    let gt = to_pixel_major((c, h, w), grad_out);
    let wts = &cache.weights;

    // Pass 1: logit gradients and dq, gathered per query pixel.
    let rows: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(h, |i| {
        let mut dq = vec![0.0; w * c];
        let mut dlog = vec![0.0; w * heads * win];
        for j in 0..w {
            let p = i * w + j;
            let (a0, a1, b0, b1) = g.bounds(i, j);
            for l in 0..heads {
                let base = (p * heads + l) * win;
                let grow = &gt[p * c + l * d..p * c + (l + 1) * d];
                let drow = &mut dlog[(j * heads + l) * win..(j * heads + l + 1) * win];
                let mut dot = 0.0;
                for a in a0..=a1 {
                    for b in b0..=b1 {
                        let s = g.slot(i, j, a, b);
                        let vv = &vt[(a * w + b) * c + l * d..(a * w + b) * c + (l + 1) * d];
                        let da = grow.iter().zip(vv).map(|(x, y)| x * y).sum::<f64>();
                        drow[s] = da;
                        dot += wts[base + s] * da;
                    }
                }
                let dqrow = &mut dq[j * c + l * d..j * c + (l + 1) * d];
                for a in a0..=a1 {
                    for b in b0..=b1 {
                        let s = g.slot(i, j, a, b);
                        drow[s] = wts[base + s] * (drow[s] - dot) * scale;
                        let kv = &kt[(a * w + b) * c + l * d..(a * w + b) * c + (l + 1) * d];
                        for (o, x) in dqrow.iter_mut().zip(kv) {
                            *o += drow[s] * x;
                        }
                    }
                }
            }
        }
        (dq, dlog)
    });
    let mut dq_t = Vec::with_capacity(h * w * c);
    let mut dlog = Vec::with_capacity(h * w * heads * win);
    for (a, b) in rows {
        dq_t.extend(a);
        dlog.extend(b);
    }

    // Pass 2: dk and dv, gathered per key pixel. Unclipped windows are
    // symmetric, so (a, b) sees exactly the queries within `radius` of it.
    let rows: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(h, |a| {
        let mut dk = vec![0.0; w * c];
        let mut dv = vec![0.0; w * c];
        for b in 0..w {
            let (i0, i1, j0, j1) = g.bounds(a, b);
            for i in i0..=i1 {
                for j in j0..=j1 {
                    let p = i * w + j;
                    let s = g.slot(i, j, a, b);
                    for l in 0..heads {
                        let idx = (p * heads + l) * win + s;
                        let (dl, wt) = (dlog[idx], wts[idx]);
                        let qv = &qt[p * c + l * d..p * c + (l + 1) * d];
                        let gv = &gt[p * c + l * d..p * c + (l + 1) * d];
                        let off = b * c + l * d;
                        for t in 0..d {
                            dk[off + t] += dl * qv[t];
                            dv[off + t] += wt * gv[t];
                        }
                    }
                }
            }
        }
        (dk, dv)
    });
    let mut dk_t = Vec::with_capacity(h * w * c);
    let mut dv_t = Vec::with_capacity(h * w * c);
    for (a, b) in rows {
        dk_t.extend(a);
        dv_t.extend(b);
    }

    (
        to_channel_major((c, h, w), &dq_t),
        to_channel_major((c, h, w), &dk_t),
        to_channel_major((c, h, w), &dv_t),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for n_in in 1..7 {
            for stride in 1..4 {
                for pad in 0..3 {
                    for k in [1usize, 3, 5] {
                        if n_in + 2 * pad < k {
                            continue;
                        }
                        let n_out = (n_in + 2 * pad - k) / stride + 1;
                        for tap in 0..k {
                            let (lo, hi) = valid_range(n_in, n_out, tap, stride, pad);
                            for o in 0..n_out {
                                let i = (o * stride + tap) as isize - pad as isize;
                                let inside = i >= 0 && i < n_in as isize;
                                assert_eq!(
                                    inside,
                                    (lo..hi).contains(&o),
                                    "n_in={n_in} s={stride} p={pad} tap={tap} o={o}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn bilinear_taps_scale_one_is_identity() {
        for (o, &(i0, _, w0, w1)) in bilinear_taps(5, 1).iter().enumerate() {
            assert_eq!(i0, o);
            assert_eq!((w0, w1), (1.0, 0.0));
        }
    }
}
