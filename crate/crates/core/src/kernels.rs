//! Forward kernels shared by the autograd graph and eager inference.
//!
//! Convolutions are stride-1 cross-correlations lowered to `sgemm` over
//! im2col row bands, so the scratch buffer stays bounded for large planes.

use crate::par;
use crate::tensor::{Shape, Tensor};
use std::sync::Arc;

/// Upper bound on the im2col scratch buffer, in `f32` elements.
const IM2COL_BUDGET: usize = 1 << 20;

fn conv_out_dim(input: usize, k: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "convolution kernel {k} larger than padded input {input}+2*{pad}"
    );
    input + 2 * pad + 1 - k
}

fn band_rows(kdim: usize, out_w: usize, out_h: usize) -> usize {
    let per_row = (kdim * out_w).max(1);
    (IM2COL_BUDGET / per_row).clamp(1, out_h.max(1))
}

/// Fills `cols` (`[ci*k*k, rows*out_w]`) for output rows `oy0..oy0+rows`.
#[allow(clippy::too_many_arguments)]
fn im2col_band(
    x: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    out_w: usize,
    oy0: usize,
    rows: usize,
    cols: &mut [f32],
) {
    let band = rows * out_w;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for a in 0..k {
            for b in 0..k {
                let row = (c * k + a) * k + b;
                let dst = &mut cols[row * band..(row + 1) * band];
                // valid ox: 0 <= ox + b - pad < w
                let ox_lo = pad.saturating_sub(b).min(out_w);
                let ox_hi = (w + pad).saturating_sub(b).min(out_w).max(ox_lo);
                for r in 0..rows {
                    let oy = oy0 + r;
                    let seg = &mut dst[r * out_w..(r + 1) * out_w];
                    let iy = oy as isize + a as isize - pad as isize;
                    if iy < 0 || iy >= h as isize || ox_lo >= ox_hi {
                        seg.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    seg[..ox_lo].fill(0.0);
                    let ix0 = ox_lo + b - pad;
                    seg[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                    seg[ox_hi..].fill(0.0);
                }
            }
        }
    }
}

/// `y = conv(x, w) + b`, stride 1, zero padding `pad`.
///
/// `x: [n, ci, h, w]`, `w: [co, ci, k, k]`, `b: [1, co, 1, 1]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = weight.shape();
    assert_eq!(ws.h, ws.w, "square kernels only");
    assert_eq!(
        xs.c, ws.c,
        "conv2d channel mismatch: input {xs:?} weight {ws:?}"
    );
    let k = ws.h;
    let (co, ci) = (ws.n, ws.c);
    let oh = conv_out_dim(xs.h, k, pad);
    let ow = conv_out_dim(xs.w, k, pad);
    let kdim = ci * k * k;
    let out_plane = oh * ow;
    let mut out = Tensor::zeros(Shape::new(xs.n, co, oh, ow));
    let wdata = weight.data();
    let bdata = bias.map(|b| {
        assert_eq!(b.numel(), co, "bias length mismatch");
        b.data()
    });
    let in_sample = ci * xs.plane();
    let xdata = x.data();
    par::for_each_chunk_mut(out.data_mut(), co * out_plane, |n, ysample| {
        let xsample = &xdata[n * in_sample..(n + 1) * in_sample];
        if k == 1 && pad == 0 {
            // SAFETY: a is [co, ci], b is [ci, plane], c is [co, plane]; all
            // strides stay within the provided slices.
            unsafe {
                matrixmultiply::sgemm(
                    co,
                    ci,
                    out_plane,
                    1.0,
                    wdata.as_ptr(),
                    ci as isize,
                    1,
                    xsample.as_ptr(),
                    out_plane as isize,
                    1,
                    0.0,
                    ysample.as_mut_ptr(),
                    out_plane as isize,
                    1,
                );
            }
        } else {
            let rows_per = band_rows(kdim, ow, oh);
            let mut cols = vec![0.0f32; kdim * rows_per * ow];
            let mut oy0 = 0;
            while oy0 < oh {
                let rows = rows_per.min(oh - oy0);
                let band = rows * ow;
                im2col_band(xsample, ci, xs.h, xs.w, k, pad, ow, oy0, rows, &mut cols);
                // SAFETY: a is [co, kdim] row-major, b is [kdim, band],
                // c starts at column oy0*ow of a [co, out_plane] matrix and
                // covers `band` columns of every row.
                unsafe {
                    matrixmultiply::sgemm(
                        co,
                        kdim,
                        band,
                        1.0,
                        wdata.as_ptr(),
                        kdim as isize,
                        1,
                        cols.as_ptr(),
                        band as isize,
                        1,
                        0.0,
                        ysample.as_mut_ptr().add(oy0 * ow),
                        out_plane as isize,
                        1,
                    );
                }
                oy0 += rows;
            }
        }
        if let Some(b) = bdata {
            for (o, plane) in ysample.chunks_mut(out_plane).enumerate() {
                let bv = b[o];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

/// Gradient of `conv2d` with respect to its weight, `[co, ci, k, k]`.
pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, k: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let gs = gy.shape();
    let (ci, co) = (xs.c, gs.c);
    let oh = conv_out_dim(xs.h, k, pad);
    let ow = conv_out_dim(xs.w, k, pad);
    assert_eq!(
        (gs.n, gs.h, gs.w),
        (xs.n, oh, ow),
        "weight-grad shape mismatch: x {xs:?} gy {gs:?}"
    );
    let kdim = ci * k * k;
    let out_plane = oh * ow;
    let in_sample = ci * xs.plane();
    let xdata = x.data();
    let gdata = gy.data();
    let partials: Vec<Vec<f32>> = par::map_range(xs.n, |n| {
        let xsample = &xdata[n * in_sample..(n + 1) * in_sample];
        let gsample = &gdata[n * co * out_plane..(n + 1) * co * out_plane];
        let mut gw = vec![0.0f32; co * kdim];
        if k == 1 && pad == 0 {
            // SAFETY: a is gy [co, plane], b is x^T [plane, ci] via strides.
            unsafe {
                matrixmultiply::sgemm(
                    co,
                    out_plane,
                    ci,
                    1.0,
                    gsample.as_ptr(),
                    out_plane as isize,
                    1,
                    xsample.as_ptr(),
                    1,
                    out_plane as isize,
                    0.0,
                    gw.as_mut_ptr(),
                    ci as isize,
                    1,
                );
            }
            return gw;
        }
        let rows_per = band_rows(kdim, ow, oh);
        let mut cols = vec![0.0f32; kdim * rows_per * ow];
        let mut oy0 = 0;
        while oy0 < oh {
            let rows = rows_per.min(oh - oy0);
            let band = rows * ow;
            im2col_band(xsample, ci, xs.h, xs.w, k, pad, ow, oy0, rows, &mut cols);
            // SAFETY: a is the gy column band [co, band] with row stride
            // out_plane; b is cols^T [band, kdim]; c is gw [co, kdim].
            unsafe {
                matrixmultiply::sgemm(
                    co,
                    band,
                    kdim,
                    1.0,
                    gsample.as_ptr().add(oy0 * ow),
                    out_plane as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    band as isize,
                    1.0,
                    gw.as_mut_ptr(),
                    kdim as isize,
                    1,
                );
            }
            oy0 += rows;
        }
        gw
    });
    let mut total = vec![0.0f32; co * kdim];
    for p in &partials {
        total.iter_mut().zip(p.iter()).for_each(|(t, &v)| *t += v);
    }
    Tensor::from_vec(Shape::new(co, ci, k, k), total)
}

/// Swaps the in/out channel axes and rotates each kernel by 180°.
pub fn flip_transpose(w: &Tensor) -> Tensor {
    let s = w.shape();
    let k = s.h;
    Tensor::from_fn(Shape::new(s.c, s.n, s.w, s.h), |i, o, a, b| {
        w.at(o, i, k - 1 - a, k - 1 - b)
    })
}

pub fn upsample_nearest(x: &Tensor, f: usize) -> Tensor {
    let s = x.shape();
    let (oh, ow) = (s.h * f, s.w * f);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let src = x.data();
    let plane = s.plane();
    par::for_each_chunk_mut(out.data_mut(), oh * ow, |nc, dst| {
        let p = &src[nc * plane..(nc + 1) * plane];
        for y in 0..oh {
            let row = &p[(y / f) * s.w..(y / f + 1) * s.w];
            let d = &mut dst[y * ow..(y + 1) * ow];
            for (x, v) in d.iter_mut().enumerate() {
                *v = row[x / f];
            }
        }
    });
    out
}

/// Sums each `f × f` block; adjoint of [`upsample_nearest`].
pub fn sum_pool(x: &Tensor, f: usize) -> Tensor {
    let s = x.shape();
    assert!(
        s.h % f == 0 && s.w % f == 0,
        "sum_pool needs dims divisible by {f}, got {s:?}"
    );
    let (oh, ow) = (s.h / f, s.w / f);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let src = x.data();
    let plane = s.plane();
    par::for_each_chunk_mut(out.data_mut(), oh * ow, |nc, dst| {
        let p = &src[nc * plane..(nc + 1) * plane];
        for y in 0..s.h {
            let row = &p[y * s.w..(y + 1) * s.w];
            let d = &mut dst[(y / f) * ow..(y / f + 1) * ow];
            for (x, &v) in row.iter().enumerate() {
                d[x / f] += v;
            }
        }
    });
    out
}

/// A sparse 1-D linear resampling operator (`out_len × in_len`).
#[derive(Clone, Debug, PartialEq)]
pub struct AxisResampler {
    pub in_len: usize,
    pub out_len: usize,
    taps: Vec<Vec<(u32, f32)>>,
}

impl AxisResampler {
    pub fn from_taps(in_len: usize, out_len: usize, taps: Vec<Vec<(u32, f32)>>) -> Self {
        assert_eq!(taps.len(), out_len);
        Self {
            in_len,
            out_len,
            taps,
        }
    }

    pub fn taps(&self, o: usize) -> &[(u32, f32)] {
        &self.taps[o]
    }

    pub fn transpose(&self) -> Self {
        let mut t: Vec<Vec<(u32, f32)>> = vec![Vec::new(); self.in_len];
        for (o, row) in self.taps.iter().enumerate() {
            for &(i, wv) in row {
                t[i as usize].push((o as u32, wv));
            }
        }
        Self {
            in_len: self.out_len,
            out_len: self.in_len,
            taps: t,
        }
    }

    /// Dense matrix form, row-major `[out_len, in_len]`.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.out_len * self.in_len];
        for (o, row) in self.taps.iter().enumerate() {
            for &(i, wv) in row {
                m[o * self.in_len + i as usize] += wv as f64;
            }
        }
        m
    }
}

/// Separable resampling `out = Ry · X · Rxᵀ` applied to every plane.
pub fn resample(x: &Tensor, ry: &AxisResampler, rx: &AxisResampler) -> Tensor {
    let s = x.shape();
    assert_eq!(
        (s.h, s.w),
        (ry.in_len, rx.in_len),
        "resampler does not match input {s:?}"
    );
    let (oh, ow) = (ry.out_len, rx.out_len);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let src = x.data();
    let plane = s.plane();
    par::for_each_chunk_mut(out.data_mut(), oh * ow, |nc, dst| {
        let p = &src[nc * plane..(nc + 1) * plane];
        let mut tmp = vec![0.0f32; s.h * ow];
        for y in 0..s.h {
            let row = &p[y * s.w..(y + 1) * s.w];
            let t = &mut tmp[y * ow..(y + 1) * ow];
            for (ox, tv) in t.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for &(i, wv) in rx.taps(ox) {
                    acc += wv * row[i as usize];
                }
                *tv = acc;
            }
        }
        for oy in 0..oh {
            let d = &mut dst[oy * ow..(oy + 1) * ow];
            for &(i, wv) in ry.taps(oy) {
                let t = &tmp[i as usize * ow..(i as usize + 1) * ow];
                d.iter_mut().zip(t.iter()).for_each(|(dv, &tv)| *dv += wv * tv);
            }
        }
    });
    out
}

pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let s0 = parts[0].shape();
    let total_c: usize = parts.iter().map(|t| t.shape().c).sum();
    for p in parts {
        let s = p.shape();
        assert_eq!(
            (s.n, s.h, s.w),
            (s0.n, s0.h, s0.w),
            "concat spatial/batch mismatch"
        );
    }
    let plane = s0.plane();
    let mut data = Vec::with_capacity(s0.n * total_c * plane);
    for n in 0..s0.n {
        for p in parts {
            data.extend_from_slice(p.sample(n));
        }
    }
    Tensor::from_vec(Shape::new(s0.n, total_c, s0.h, s0.w), data)
}

pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Tensor {
    let s = x.shape();
    assert!(start + len <= s.c, "channel slice out of range");
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        let smp = x.sample(n);
        data.extend_from_slice(&smp[start * plane..(start + len) * plane]);
    }
    Tensor::from_vec(Shape::new(s.n, len, s.h, s.w), data)
}

/// Embeds `x` at channel offset `start` of a zero tensor with `total` channels.
pub fn pad_channels(x: &Tensor, start: usize, total: usize) -> Tensor {
    let s = x.shape();
    assert!(start + s.c <= total);
    let plane = s.plane();
    let mut out = Tensor::zeros(Shape::new(s.n, total, s.h, s.w));
    let od = out.data_mut();
    for n in 0..s.n {
        let base = (n * total + start) * plane;
        od[base..base + s.c * plane].copy_from_slice(x.sample(n));
    }
    out
}

pub fn broadcast_to(x: &Tensor, target: Shape) -> Tensor {
    let s = x.shape();
    assert!(
        target.reduces_to(&s),
        "cannot broadcast {s:?} to {target:?}"
    );
    if s == target {
        return x.clone();
    }
    Tensor::from_fn(target, |n, c, y, xx| {
        x.at(
            if s.n == 1 { 0 } else { n },
            if s.c == 1 { 0 } else { c },
            if s.h == 1 { 0 } else { y },
            if s.w == 1 { 0 } else { xx },
        )
    })
}

pub fn sum_to(x: &Tensor, target: Shape) -> Tensor {
    let s = x.shape();
    assert!(s.reduces_to(&target), "cannot reduce {s:?} to {target:?}");
    if s == target {
        return x.clone();
    }
    let mut acc = vec![0.0f64; target.numel()];
    let d = x.data();
    let mut i = 0;
    for n in 0..s.n {
        let tn = if target.n == 1 { 0 } else { n };
        for c in 0..s.c {
            let tc = if target.c == 1 { 0 } else { c };
            for y in 0..s.h {
                let ty = if target.h == 1 { 0 } else { y };
                let base = ((tn * target.c + tc) * target.h + ty) * target.w;
                if target.w == 1 {
                    let row: f64 = d[i..i + s.w].iter().map(|&v| v as f64).sum();
                    acc[base] += row;
                } else {
                    for xx in 0..s.w {
                        acc[base + xx] += d[i + xx] as f64;
                    }
                }
                i += s.w;
            }
        }
    }
    Tensor::from_vec(target, acc.into_iter().map(|v| v as f32).collect())
}

/// Shared handle type the graph stores for resampling ops.
pub type SharedResampler = Arc<AxisResampler>;
