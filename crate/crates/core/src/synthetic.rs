//! Procedural test images.

use crate::image_tensor::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sky gradient over rolling hills with striped texture and a sun disk.
/// Has strong vertical structure and repeating horizontal texture.
pub fn landscape(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f32 = rng.random_range(0.0..6.28);
    let freq: f32 = rng.random_range(2.0..4.0);
    let sun_x: f32 = rng.random_range(0.2..0.8);
    let stripe: f32 = rng.random_range(10.0..16.0);
    let (hf, wf) = (height as f32, width as f32);
    ImageTensor::from_fn(height, width, |_, c, y, x| {
        let u = x as f32 / wf;
        let v = y as f32 / hf;
        let horizon = 0.55 + 0.08 * (u * freq * 6.2832 + phase).sin();
        let val = if v < horizon {
            let sky = [0.2 + 0.5 * v, 0.4 + 0.4 * v, 0.9 - 0.2 * v][c];
            let d = ((u - sun_x).powi(2) + (v - 0.2).powi(2)).sqrt();
            if d < 0.08 {
                [1.0, 0.9, 0.4][c]
            } else {
                sky
            }
        } else {
            let depth = (v - horizon) / (1.0 - horizon + 1e-3);
            let tex = 0.5 + 0.5 * ((x as f32 + 3.0 * y as f32) / stripe * 6.2832).sin();
            [0.15 + 0.2 * tex, 0.35 + 0.25 * tex - 0.2 * depth, 0.1 + 0.1 * tex][c]
        };
        val * 2.0 - 1.0
    })
}

/// Diagonal colour bars; used as an "unrelated" reference image.
pub fn bars(height: usize, width: usize, period: usize) -> ImageTensor {
    ImageTensor::from_fn(height, width, |_, c, y, x| {
        let k = ((x + 2 * y) / period.max(1) + c) % 3;
        [-0.8, 0.1, 0.9][k]
    })
}

/// Random sum of oriented sinusoids plus sharp edges.
pub fn texture(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f32, f32, f32, usize)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.05..0.6),
                rng.random_range(0.0..6.28),
                rng.random_range(0.0..6.28),
                rng.random_range(0..3),
            )
        })
        .collect();
    let cut: f32 = rng.random_range(0.3..0.7);
    ImageTensor::from_fn(height, width, |_, c, y, x| {
        let mut v = 0.0;
        for &(f, theta, ph, ch) in &waves {
            let p = (x as f32 * theta.cos() + y as f32 * theta.sin()) * f + ph;
            v += if ch == c { 0.45 } else { 0.15 } * p.sin();
        }
        if (x as f32) < cut * width as f32 && (y as f32) > 0.5 * height as f32 {
            v = -v + 0.3;
        }
        v.clamp(-1.0, 1.0)
    })
}
