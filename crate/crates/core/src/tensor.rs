//! Dense NCHW `f32` tensors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;

/// A 4-D shape in `[batch, channels, height, width]` order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// True when every dim of `target` is either equal to ours or 1.
    pub fn reduces_to(&self, target: &Shape) -> bool {
        self.dims()
            .iter()
            .zip(target.dims().iter())
            .all(|(&a, &b)| a == b || b == 1)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.numel(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f32, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let v: f32 = StandardNormal.sample(rng);
                v * std
            })
            .collect();
        Self { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f32, hi: f32, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Single scalar value; panics unless the tensor has one element.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// Reinterprets the buffer with a new shape of equal size.
    pub fn reshape(mut self, shape: Shape) -> Self {
        assert_eq!(shape.numel(), self.data.len());
        self.shape = shape;
        self
    }

    /// One `[c, h, w]` plane-block for batch entry `n`.
    pub fn sample(&self, n: usize) -> &[f32] {
        let s = self.shape.c * self.shape.plane();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        self.data
            .iter_mut()
            .zip(other.data.iter())
            .for_each(|(a, &b)| *a += b);
    }

    pub fn scale_in_place(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len().max(1) as f64
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Spatial crop `[y0, y0+h) × [x0, x0+w)` of every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let s = self.shape;
        assert!(y0 + h <= s.h && x0 + w <= s.w, "crop out of bounds");
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
        for nc in 0..s.n * s.c {
            for y in 0..h {
                let src = nc * s.plane() + (y0 + y) * s.w + x0;
                let dst = nc * h * w + y * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }

    /// Writes `src` into this tensor at spatial offset `(y0, x0)`.
    pub fn paste(&mut self, src: &Tensor, y0: usize, x0: usize) {
        let s = self.shape;
        let t = src.shape;
        assert_eq!((s.n, s.c), (t.n, t.c));
        assert!(y0 + t.h <= s.h && x0 + t.w <= s.w, "paste out of bounds");
        for nc in 0..s.n * s.c {
            for y in 0..t.h {
                let dst = nc * s.plane() + (y0 + y) * s.w + x0;
                let from = nc * t.plane() + y * t.w;
                self.data[dst..dst + t.w].copy_from_slice(&src.data[from..from + t.w]);
            }
        }
    }

    /// Mirror along the width axis.
    pub fn flip_horizontal(&self) -> Self {
        let s = self.shape;
        Tensor::from_fn(s, |n, c, y, x| self.at(n, c, y, s.w - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        let s = self.shape;
        Tensor::from_fn(s, |n, c, y, x| self.at(n, c, s.h - 1 - y, x))
    }

    /// Stacks equally shaped single-sample tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Self {
        assert!(!items.is_empty(), "stack of zero tensors");
        let s = items[0].shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        for t in items {
            assert_eq!(
                (t.shape.c, t.shape.h, t.shape.w),
                (s.c, s.h, s.w),
                "stack shape mismatch"
            );
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape::new(items.len() * s.n, s.c, s.h, s.w), data)
    }

    /// Batch entry `n` as a standalone tensor with batch size 1.
    pub fn batch_item(&self, n: usize) -> Self {
        let s = self.shape;
        Tensor::from_vec(Shape::new(1, s.c, s.h, s.w), self.sample(n).to_vec())
    }

    /// Raw bit patterns, for bitwise comparisons.
    pub fn to_bits(&self) -> Vec<u32> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }
}
