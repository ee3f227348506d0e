//! Per-tile memory model and budgeted tile-size planning.

use crate::error::{Error, Result};
use crate::nn::LayerDesc;
use crate::tiler::TileLayout;
use serde::{Deserialize, Serialize};

/// Output pixels of one upscaled padded tile: `r(h+2α) · r(w+2α)`.
pub fn estimate(h: usize, w: usize, r: usize, alpha: usize) -> u64 {
    (r * (h + 2 * alpha)) as u64 * (r * (w + 2 * alpha)) as u64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub full_size: (usize, usize),
    pub tile_core: (usize, usize),
    pub overlap: usize,
    pub ratio: usize,
    pub k: usize,
    pub per_tile_output_pixels: u64,
    pub bytes_per_pixel_factor: u64,
    pub estimated_bytes: u64,
    pub budget_bytes: u64,
}

impl TilePlan {
    pub fn layout(&self) -> Result<TileLayout> {
        TileLayout::new(self.full_size, self.tile_core, self.overlap, self.ratio)
    }

    /// Plan for a caller-chosen tile core, checked against the budget.
    pub fn manual(
        full_size: (usize, usize),
        tile_core: (usize, usize),
        overlap: usize,
        ratio: usize,
        bytes_per_pixel_factor: u64,
        budget_bytes: u64,
    ) -> Result<Self> {
        let (h, w) = (tile_core.0.min(full_size.0), tile_core.1.min(full_size.1));
        let layout = TileLayout::new(full_size, (h, w), overlap, ratio)?;
        let pixels = estimate(h, w, ratio, overlap);
        let bytes = pixels.saturating_mul(bytes_per_pixel_factor);
        if bytes > budget_bytes {
            return Err(Error::invalid(
                "memory_planner",
                format!("tile {h}x{w} with overlap {overlap} needs {bytes} bytes, over the {budget_bytes} byte budget"),
            ));
        }
        Ok(Self {
            full_size,
            tile_core: (h, w),
            overlap,
            ratio,
            k: layout.k(),
            per_tile_output_pixels: pixels,
            bytes_per_pixel_factor,
            estimated_bytes: bytes,
            budget_bytes,
        })
    }
}

fn cost(h: usize, w: usize, r: usize, alpha: usize, factor: u64) -> u128 {
    estimate(h, w, r, alpha) as u128 * factor as u128
}

/// Valid core extents along one axis of length `n`: the whole axis, or any
/// size that leaves room for the overlap on both sides.
fn valid(v: usize, n: usize, alpha: usize) -> bool {
    v == n || (v >= 1 && v + 2 * alpha <= n)
}

/// Largest valid `w` for tile height `h`, if any.
fn widest(h: usize, ww: usize, r: usize, alpha: usize, budget: u64, factor: u64) -> Option<usize> {
    // cost = unit · (w + 2α)
    let unit = (r * (h + 2 * alpha)) as u128 * r as u128 * factor as u128;
    let cap = budget as u128 / unit;
    let cap = cap.checked_sub(2 * alpha as u128)?;
    if cap >= ww as u128 {
        return Some(ww);
    }
    let w = (cap as usize).min(ww.saturating_sub(2 * alpha));
    (w >= 1 && valid(w, ww, alpha)).then_some(w)
}

fn aspect_gap(h: usize, w: usize, hh: usize, ww: usize) -> f64 {
    ((h as f64 / w as f64).ln() - (hh as f64 / ww as f64).ln()).abs()
}

/// Whether `a` beats `b`: larger area, then nearer aspect, then taller.
fn better(a: (usize, usize), b: (usize, usize), hh: usize, ww: usize) -> bool {
    let (aa, ab) = (a.0 * a.1, b.0 * b.1);
    if aa != ab {
        return aa > ab;
    }
    let (ga, gb) = (aspect_gap(a.0, a.1, hh, ww), aspect_gap(b.0, b.1, hh, ww));
    if (ga - gb).abs() > 1e-12 {
        return ga < gb;
    }
    a.0 > b.0
}

/// Maximal-area tile core whose estimate times `bytes_per_pixel_factor`
/// fits `budget_bytes`.
pub fn plan(
    full_h: usize,
    full_w: usize,
    r: usize,
    alpha: usize,
    budget_bytes: u64,
    bytes_per_pixel_factor: u64,
) -> Result<TilePlan> {
    if full_h == 0 || full_w == 0 || r == 0 || bytes_per_pixel_factor == 0 {
        return Err(Error::invalid("memory_planner", "sizes, ratio and factor must be positive"));
    }
    let mut best: Option<(usize, usize)> = None;
    for h in (1..=full_h).filter(|&h| valid(h, full_h, alpha)) {
        if let Some(w) = widest(h, full_w, r, alpha, budget_bytes, bytes_per_pixel_factor) {
            if best.is_none_or(|b| better((h, w), b, full_h, full_w)) {
                best = Some((h, w));
            }
        }
    }
    let Some((h, w)) = best else {
        return Err(Error::invalid(
            "memory_planner",
            format!(
                "budget of {budget_bytes} bytes cannot hold even a 1x1 tile with overlap {alpha} ({} bytes needed)",
                cost(1, 1, r, alpha, bytes_per_pixel_factor)
            ),
        ));
    };
    let pixels = estimate(h, w, r, alpha);
    Ok(TilePlan {
        full_size: (full_h, full_w),
        tile_core: (h, w),
        overlap: alpha,
        ratio: r,
        k: full_h.div_ceil(h) * full_w.div_ceil(w),
        per_tile_output_pixels: pixels,
        bytes_per_pixel_factor,
        estimated_bytes: pixels.saturating_mul(bytes_per_pixel_factor),
        budget_bytes,
    })
}

/// Bytes per output pixel for a network whose widest layer has
/// `channels` channels.
pub fn default_factor(channels: usize, element_size: usize) -> u64 {
    (channels * element_size) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMode {
    Train,
    Synth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub params: u64,
    pub activations: u64,
    pub gradients: u64,
    pub bytes: u64,
}

/// Counts parameters, feature values and (in training) gradients.
/// Synthesis keeps only the largest layer's input and output live.
pub fn estimate_model_memory(
    layers: &[LayerDesc],
    input: (usize, usize),
    mode: MemoryMode,
    element_size: usize,
) -> MemoryEstimate {
    let params: u64 = layers.iter().map(|l| l.params() as u64).sum();
    let acts = layers.iter().map(|l| {
        let hw = (input.0 * l.scale_num / l.scale_den) as u64 * (input.1 * l.scale_num / l.scale_den) as u64;
        (l.in_channels + l.out_channels) as u64 * hw
    });
    let (activations, gradients) = match mode {
        MemoryMode::Synth => (acts.max().unwrap_or(0), 0),
        MemoryMode::Train => {
            let a: u64 = acts.sum();
            (a, params + a)
        }
    };
    MemoryEstimate {
        params,
        activations,
        gradients,
        bytes: (params + activations + gradients) * element_size as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Conv2d;

    #[test]
    fn estimate_examples() {
        assert_eq!(estimate(4, 4, 1, 0), 16);
        assert_eq!(estimate(270, 512, 4, 24), (4 * 318) as u64 * (4 * 560) as u64);
        assert_eq!(estimate(270, 512, 4, 24), 2_849_280);
        assert!(estimate(10, 20, 2, 6) > estimate(10, 20, 2, 3));
    }

    #[test]
    fn unbounded_budget_is_single_tile() {
        let p = plan(135, 256, 4, 12, u64::MAX, 4).unwrap();
        assert_eq!((p.tile_core, p.k), ((135, 256), 1));
    }

    #[test]
    fn tiny_budget_is_error() {
        assert!(plan(64, 64, 4, 8, 100, 4).is_err());
        let need = estimate(1, 1, 4, 8) * 4;
        assert!(plan(64, 64, 4, 8, need, 4).is_ok());
    }

    #[test]
    fn square_plan_under_budget() {
        let p = plan(256, 256, 4, 8, 400_000, 1).unwrap();
        assert!(p.estimated_bytes <= 400_000);
        assert_eq!(p.per_tile_output_pixels, estimate(p.tile_core.0, p.tile_core.1, 4, 8));
        let (h, w) = p.tile_core;
        assert!(estimate(h + 1, w, 4, 8) > 400_000 || h == 256);
        assert!(estimate(h, w + 1, 4, 8) > 400_000 || w == 256);
        assert_eq!(p.layout().unwrap().k(), p.k);
    }

    #[test]
    fn single_conv_synth_by_hand() {
        let d = LayerDesc::conv(&Conv2d::zeros(3, 3, 3), 1, 1);
        let m = estimate_model_memory(&[d], (8, 8), MemoryMode::Synth, 4);
        assert_eq!(m.params, 84);
        assert_eq!(m.activations, 2 * 192);
        assert_eq!(m.bytes, (84 + 2 * 192) * 4);
        let t = estimate_model_memory(&[d], (8, 8), MemoryMode::Train, 4);
        assert!(t.bytes >= m.bytes);
    }
}
