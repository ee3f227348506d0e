//! Multi-scale resolution schedule and image pyramid.

use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::resample::resize_bicubic;
use serde::{Deserialize, Serialize};

pub const MIN_SCALE_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidSchedule {
    pub base_resolution: (usize, usize),
    pub scale_factor: f64,
    pub num_vae_scales: usize,
    pub num_gan_scales: usize,
    /// Coarsest first; the last entry is `base_resolution`.
    pub resolutions: Vec<(usize, usize)>,
}

impl PyramidSchedule {
    /// Index of the finest scale.
    pub fn finest(&self) -> usize {
        self.resolutions.len() - 1
    }

    /// Last scale trained with the VAE objective.
    pub fn last_vae_scale(&self) -> usize {
        self.num_vae_scales
    }

    pub fn is_gan_scale(&self, m: usize) -> bool {
        m > self.num_vae_scales
    }

    pub fn num_generators(&self) -> usize {
        self.resolutions.len()
    }
}

fn scaled(v: usize, factor: f64) -> usize {
    // f64::round is half-away-from-zero
    (v as f64 * factor).round() as usize
}

pub fn build_schedule(
    base_resolution: (usize, usize),
    scale_factor: f64,
    num_vae_scales: usize,
    num_gan_scales: usize,
) -> Result<PyramidSchedule> {
    let (bh, bw) = base_resolution;
    if !(scale_factor > 0.0 && scale_factor < 1.0) {
        return Err(Error::invalid(
            "pyramid",
            format!("scale factor {scale_factor} must lie in (0, 1)"),
        ));
    }
    if bh < MIN_SCALE_DIM || bw < MIN_SCALE_DIM {
        return Err(Error::invalid(
            "pyramid",
            format!("base resolution {bh}x{bw} is below {MIN_SCALE_DIM} px"),
        ));
    }
    let m = num_vae_scales + num_gan_scales;
    let mut res = vec![base_resolution];
    for _ in 0..m {
        let &(h, w) = res.last().unwrap();
        let next = (scaled(h, scale_factor), scaled(w, scale_factor));
        if next.0 < MIN_SCALE_DIM || next.1 < MIN_SCALE_DIM {
            return Err(Error::invalid(
                "pyramid",
                format!(
                    "coarsest scale would be {}x{}, below {MIN_SCALE_DIM} px; use fewer scales",
                    next.0, next.1
                ),
            ));
        }
        if next.0 >= h || next.1 >= w {
            return Err(Error::invalid(
                "pyramid",
                format!("scale {h}x{w} does not shrink under factor {scale_factor}"),
            ));
        }
        res.push(next);
    }
    res.reverse();
    Ok(PyramidSchedule {
        base_resolution,
        scale_factor,
        num_vae_scales,
        num_gan_scales,
        resolutions: res,
    })
}

/// Real-image targets for every scale, bicubically downscaled from the
/// full-resolution image.
pub fn build_pyramid(image: &ImageTensor, schedule: &PyramidSchedule) -> Result<Vec<ImageTensor>> {
    if image.size() != schedule.base_resolution {
        return Err(Error::invalid(
            "pyramid",
            format!(
                "image is {:?} but the schedule expects {:?}",
                image.size(),
                schedule.base_resolution
            ),
        ));
    }
    let finest = schedule.finest();
    Ok(schedule
        .resolutions
        .iter()
        .enumerate()
        .map(|(m, &(h, w))| {
            if m == finest {
                image.clone()
            } else {
                ImageTensor::new(resize_bicubic(image.tensor(), h, w)).expect("shape preserved")
            }
        })
        .collect())
}

/// Bicubic upsampling to `target`, clamped to [-1, 1].
pub fn upsample(image: &ImageTensor, target: (usize, usize)) -> Result<ImageTensor> {
    let (h, w) = image.size();
    if target.0 < h || target.1 < w {
        return Err(Error::invalid(
            "pyramid",
            format!("upsample target {target:?} is smaller than source {h}x{w}"),
        ));
    }
    if target == (h, w) {
        return Ok(image.clone());
    }
    let t = resize_bicubic(image.tensor(), target.0, target.1).clamp(-1.0, 1.0);
    ImageTensor::new(t)
}
