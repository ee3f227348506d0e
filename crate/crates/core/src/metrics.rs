//! Single-image Fréchet distance and pairwise perceptual diversity.
//!
//! A high diversity score says only that samples differ from each other;
//! it says nothing about whether any of them is coherent.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::nn::{Conv2d, Module};
use crate::par;
use crate::tensor::{Shape, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub const COV_EPS: f64 = 1e-6;

/// Network exposing named intermediate feature maps.
pub trait FeatureExtractor: Sync {
    fn tap_names(&self) -> Vec<String>;

    fn tap_channels(&self, tap: &str) -> Option<usize>;

    /// Every tap, in [`FeatureExtractor::tap_names`] order.
    fn forward_taps(&self, g: &Graph, x: &Var) -> Vec<Var>;

    fn features(&self, x: &Tensor, tap: &str) -> Result<Tensor> {
        let idx = self
            .tap_names()
            .iter()
            .position(|t| t == tap)
            .ok_or_else(|| Error::invalid("metrics", format!("unknown tap {tap:?}")))?;
        let g = Graph::inference();
        Ok(self.forward_taps(&g, &g.constant(x.clone())).swap_remove(idx).into_tensor())
    }
}

/// Fixed-seed random conv net with a shallow and a deep tap.
///
/// With `symmetric` set, every kernel is mirror-symmetric left to right, so
/// the whole net commutes with horizontal flips of even-width inputs.
#[derive(Clone, Debug)]
pub struct RandomFeatureNet {
    convs: Vec<Conv2d>,
    /// Layer index after which a 2x average pool is applied.
    pools: Vec<usize>,
    taps: Vec<(String, usize)>,
}

const FEATURE_SLOPE: f32 = 0.2;

impl RandomFeatureNet {
    pub fn new(seed: u64, symmetric: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [(3, 16), (16, 16), (16, 32), (32, 32), (32, 48), (48, 48)];
        let convs = widths
            .iter()
            .map(|&(i, o)| {
                let mut c = Conv2d::new(i, o, 3, FEATURE_SLOPE, 1.0, &mut rng);
                if symmetric {
                    let w = Arc::make_mut(&mut c.weight);
                    let s = w.shape();
                    for n in 0..s.n {
                        for ch in 0..s.c {
                            for y in 0..s.h {
                                for x in 0..s.w / 2 {
                                    let v = 0.5 * (w.at(n, ch, y, x) + w.at(n, ch, y, s.w - 1 - x));
                                    w.set(n, ch, y, x, v);
                                    w.set(n, ch, y, s.w - 1 - x, v);
                                }
                            }
                        }
                    }
                }
                let b = Arc::make_mut(&mut c.bias);
                for v in b.data_mut() {
                    *v = rand::Rng::random_range(&mut rng, -0.1..0.1);
                }
                c
            })
            .collect();
        Self {
            convs,
            pools: vec![1, 3],
            taps: vec![("shallow".into(), 1), ("deep".into(), 5)],
        }
    }

    pub fn desk() -> Self {
        Self::new(0x5eed_f00d, true)
    }
}

impl Default for RandomFeatureNet {
    fn default() -> Self {
        Self::desk()
    }
}

impl FeatureExtractor for RandomFeatureNet {
    fn tap_names(&self) -> Vec<String> {
        self.taps.iter().map(|t| t.0.clone()).collect()
    }

    fn tap_channels(&self, tap: &str) -> Option<usize> {
        self.taps
            .iter()
            .find(|t| t.0 == tap)
            .map(|t| self.convs[t.1].out_channels())
    }

    fn forward_taps(&self, g: &Graph, x: &Var) -> Vec<Var> {
        let mut out = Vec::new();
        let mut h = x.clone();
        let last = self.taps.iter().map(|t| t.1).max().unwrap_or(0);
        for (i, c) in self.convs.iter().enumerate().take(last + 1) {
            h = g.leaky_relu(&c.forward(g, &h), FEATURE_SLOPE);
            if self.taps.iter().any(|t| t.1 == i) {
                out.push(h.clone());
            }
            if self.pools.contains(&i) && h.shape().h >= 2 && h.shape().w >= 2 {
                h = g.avg_pool(&h, 2);
            }
        }
        out
    }
}

impl Module for RandomFeatureNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor>)) {
        self.convs.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor>)) {
        self.convs.visit_mut(prefix, f)
    }
}

/// Mean and covariance of the spatial feature vectors of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }

    /// Statistics of feature rows `[n, dim]`, with `eps` on the diagonal.
    pub fn from_samples(rows: &[Vec<f64>], eps: f64) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::invalid(
                "metrics",
                "feature grid has fewer than 2 positions",
            ));
        }
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
            cov[i * d + i] += eps;
        }
        Ok(Self { mean, cov })
    }
}

fn feature_rows(f: &Tensor) -> Vec<Vec<f64>> {
    let s = f.shape();
    let mut rows = Vec::with_capacity(s.n * s.plane());
    for n in 0..s.n {
        for p in 0..s.plane() {
            rows.push(
                (0..s.c)
                    .map(|c| f.data()[(n * s.c + c) * s.plane() + p] as f64)
                    .collect(),
            );
        }
    }
    rows
}

pub fn image_stats(image: &ImageTensor, extractor: &dyn FeatureExtractor, tap: &str) -> Result<GaussianStats> {
    let f = extractor.features(image.tensor(), tap)?;
    GaussianStats::from_samples(&feature_rows(&f), COV_EPS)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|&v| v < -1e-9 * scale) {
        return Err(Error::invalid("metrics", "covariance is not positive semidefinite"));
    }
    let d = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// Squared 2-Wasserstein distance between two Gaussians.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(
            "metrics",
            format!("stat dims differ: {} vs {}", a.dim(), b.dim()),
        ));
    }
    if a == b {
        return Ok(0.0);
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let sa = a.cov_matrix();
    let sb = b.cov_matrix();
    // Tr (Σa Σb)^½ = Tr (S Σb S)^½ with S = Σa^½, which stays symmetric.
    let s = psd_sqrt(&sa)?;
    let inner = &s * &sb * &s;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let tr_cross: f64 = eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum();
    psd_sqrt(&sb)?;
    let d = mean_term + (sa.trace() + sb.trace() - 2.0 * tr_cross);
    Ok(d.max(0.0))
}

pub fn sifid(
    real: &ImageTensor,
    fake: &ImageTensor,
    extractor: &dyn FeatureExtractor,
    tap: &str,
) -> Result<f64> {
    if real.size() != fake.size() {
        return Err(Error::invalid(
            "metrics",
            format!("sifid needs equal sizes, got {:?} and {:?}", real.size(), fake.size()),
        ));
    }
    frechet_distance(
        &image_stats(real, extractor, tap)?,
        &image_stats(fake, extractor, tap)?,
    )
}

/// Distance between two images in some perceptual feature space.
pub trait PerceptualMetric: Sync {
    type Embedding: Send + Sync;

    fn embed(&self, image: &ImageTensor) -> Self::Embedding;

    fn distance(&self, a: &Self::Embedding, b: &Self::Embedding) -> f64;
}

/// Channel-normalised feature distance averaged over space, summed over
/// taps.
pub struct LpipsLike<'a> {
    pub extractor: &'a dyn FeatureExtractor,
}

impl PerceptualMetric for LpipsLike<'_> {
    type Embedding = Vec<Tensor>;

    fn embed(&self, image: &ImageTensor) -> Vec<Tensor> {
        let g = Graph::inference();
        self.extractor
            .forward_taps(&g, &g.constant(image.tensor().clone()))
            .into_iter()
            .map(|v| unit_normalise(v.value()))
            .collect()
    }

    fn distance(&self, a: &Vec<Tensor>, b: &Vec<Tensor>) -> f64 {
        a.iter()
            .zip(b)
            .map(|(fa, fb)| {
                let s = fa.shape();
                let sq: f64 = fa
                    .data()
                    .iter()
                    .zip(fb.data())
                    .map(|(&x, &y)| ((x - y) as f64).powi(2))
                    .sum();
                sq / (s.n * s.plane()) as f64
            })
            .sum()
    }
}

fn unit_normalise(f: &Tensor) -> Tensor {
    let s = f.shape();
    let mut out = f.clone();
    let p = s.plane();
    for n in 0..s.n {
        for i in 0..p {
            let idx = |c: usize| (n * s.c + c) * p + i;
            let norm = (0..s.c)
                .map(|c| (f.data()[idx(c)] as f64).powi(2))
                .sum::<f64>()
                .sqrt()
                + 1e-10;
            for c in 0..s.c {
                out.data_mut()[idx(c)] = (f.data()[idx(c)] as f64 / norm) as f32;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub mean: f64,
    pub pairs: usize,
    pub samples: usize,
}

/// Mean distance over all unordered pairs, at most `max_jobs` concurrent
/// evaluations (0 = unbounded).
pub fn lpips_diversity<M: PerceptualMetric>(
    images: &[ImageTensor],
    metric: &M,
    max_jobs: usize,
) -> Result<DiversityReport> {
    if images.len() < 2 {
        return Err(Error::invalid("metrics", "diversity needs at least 2 images"));
    }
    if images.iter().any(|i| i.size() != images[0].size()) {
        return Err(Error::invalid("metrics", "diversity needs equally sized images"));
    }
    let emb = par::map_range_bounded(images.len(), max_jobs, |i| metric.embed(&images[i]));
    let n = images.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let d = par::map_range_bounded(pairs.len(), max_jobs, |k| {
        let (i, j) = pairs[k];
        metric.distance(&emb[i], &emb[j])
    });
    Ok(DiversityReport {
        mean: d.iter().sum::<f64>() / d.len() as f64,
        pairs: d.len(),
        samples: n,
    })
}

/// Shape of a tap output for an input of the given size.
pub fn tap_shape(extractor: &dyn FeatureExtractor, tap: &str, h: usize, w: usize) -> Result<Shape> {
    Ok(extractor.features(&Tensor::zeros(Shape::new(1, 3, h, w)), tap)?.shape())
}
