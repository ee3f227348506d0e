//! Bicubic resampling operators.
//!
//! Keys cubic kernel (a = -0.5), half-pixel centres, replicate borders and
//! kernel widening when shrinking. Taps are renormalised to sum to one, so
//! constant images stay constant in both directions.

use crate::kernels::{self, AxisResampler};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

const CUBIC_A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (CUBIC_A + 2.0) * x * x * x - (CUBIC_A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        CUBIC_A * x * x * x - 5.0 * CUBIC_A * x * x + 8.0 * CUBIC_A * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Builds the 1-D bicubic operator mapping `in_len` samples to `out_len`.
pub fn bicubic_axis(in_len: usize, out_len: usize) -> AxisResampler {
    assert!(in_len > 0 && out_len > 0, "empty resample axis");
    let scale = out_len as f64 / in_len as f64;
    let shrink = scale.min(1.0);
    let support = 2.0 / shrink;
    let mut taps = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let centre = (o as f64 + 0.5) / scale - 0.5;
        let lo = (centre - support).floor() as i64;
        let hi = (centre + support).ceil() as i64;
        let mut acc: Vec<(u32, f64)> = Vec::new();
        let mut total = 0.0;
        for j in lo..=hi {
            let wv = cubic((j as f64 - centre) * shrink);
            if wv == 0.0 {
                continue;
            }
            let idx = j.clamp(0, in_len as i64 - 1) as u32;
            total += wv;
            match acc.iter_mut().find(|(i, _)| *i == idx) {
                Some(e) => e.1 += wv,
                None => acc.push((idx, wv)),
            }
        }
        acc.sort_by_key(|e| e.0);
        taps.push(
            acc.into_iter()
                .map(|(i, wv)| (i, (wv / total) as f32))
                .collect(),
        );
    }
    AxisResampler::from_taps(in_len, out_len, taps)
}

type AxisKey = (usize, usize);

fn axis_cache() -> &'static Mutex<HashMap<AxisKey, Arc<AxisResampler>>> {
    static CACHE: OnceLock<Mutex<HashMap<AxisKey, Arc<AxisResampler>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Memoised [`bicubic_axis`].
pub fn bicubic_axis_shared(in_len: usize, out_len: usize) -> Arc<AxisResampler> {
    let mut cache = axis_cache().lock().expect("resampler cache poisoned");
    cache
        .entry((in_len, out_len))
        .or_insert_with(|| Arc::new(bicubic_axis(in_len, out_len)))
        .clone()
}

/// Bicubic resize of every plane of `x` to `(height, width)`.
pub fn resize_bicubic(x: &Tensor, height: usize, width: usize) -> Tensor {
    let s = x.shape();
    if (s.h, s.w) == (height, width) {
        return x.clone();
    }
    let ry = bicubic_axis_shared(s.h, height);
    let rx = bicubic_axis_shared(s.w, width);
    kernels::resample(x, &ry, &rx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_sum_to_one() {
        for &(i, o) in &[(10, 20), (20, 10), (135, 101), (7, 7), (3, 12)] {
            let r = bicubic_axis(i, o);
            for k in 0..o {
                let s: f32 = r.taps(k).iter().map(|t| t.1).sum();
                assert!((s - 1.0).abs() < 1e-5, "{i}->{o} row {k} sums {s}");
            }
        }
    }

    #[test]
    fn identity_size_is_identity() {
        let r = bicubic_axis(9, 9);
        for k in 0..9 {
            assert_eq!(r.taps(k), &[(k as u32, 1.0)]);
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let r = bicubic_axis(6, 13);
        let d = r.to_dense();
        let t = r.transpose().to_dense();
        for o in 0..13 {
            for i in 0..6 {
                assert!((d[o * 6 + i] - t[i * 13 + o]).abs() < 1e-7);
            }
        }
    }
}
