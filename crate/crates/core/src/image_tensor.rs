//! Single RGB image stored as a `[1, 3, H, W]` tensor with values in [-1, 1].

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 3 || s.h == 0 || s.w == 0 {
            return Err(Error::invalid(
                "image",
                format!("expected a [1, 3, H, W] tensor, got {s:?}"),
            ));
        }
        Ok(Self(t))
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self(Tensor::full(Shape::new(1, 3, height, width), value))
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        Self(Tensor::from_fn(Shape::new(1, 3, height, width), f))
    }

    /// Uniform noise in [-1, 1).
    pub fn random<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Self {
        Self(Tensor::uniform(Shape::new(1, 3, height, width), -1.0, 1.0, rng))
    }

    pub fn height(&self) -> usize {
        self.0.shape().h
    }

    pub fn width(&self) -> usize {
        self.0.shape().w
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn clamped(&self) -> Self {
        Self(self.0.clamp(-1.0, 1.0))
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self(self.0.crop(y0, x0, h, w))
    }
}

/// Peak signal-to-noise ratio in dB for [-1, 1] images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> f64 {
    assert_eq!(a.size(), b.size(), "psnr size mismatch");
    let mse = a
        .tensor()
        .data()
        .iter()
        .zip(b.tensor().data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.tensor().numel() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (4.0 / mse).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_channel_count() {
        assert!(ImageTensor::new(Tensor::zeros(Shape::new(1, 1, 4, 4))).is_err());
        assert!(ImageTensor::new(Tensor::zeros(Shape::new(2, 3, 4, 4))).is_err());
    }

    #[test]
    fn psnr_known_value() {
        let a = ImageTensor::filled(4, 4, 0.0);
        let b = ImageTensor::filled(4, 4, 0.2);
        assert!((psnr(&a, &b) - 10.0 * (4.0f64 / 0.04).log10()).abs() < 1e-4);
        assert!(psnr(&a, &a).is_infinite());
    }
}
