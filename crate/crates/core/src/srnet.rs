//! Residual-in-residual dense super-resolution network, degradation model
//! and the pre-train / fine-tune loops.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::kernels::AxisResampler;
use crate::metrics::FeatureExtractor;
use crate::nn::{self, Adam, Conv2d, LayerDesc, Module, MultiStepLr};
use crate::resample::{bicubic_axis, resize_bicubic};
use crate::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

const SLOPE: f32 = 0.2;
const RESIDUAL_SCALE: f32 = 0.2;

/// Anything mapping an image tensor to one `ratio` times larger.
pub trait SrNetwork: Sync {
    fn ratio(&self) -> usize;

    /// Analytic receptive-field radius in input pixels.
    fn trf_radius(&self) -> usize;

    fn in_channels(&self) -> usize {
        3
    }

    fn forward_graph(&self, g: &Graph, x: &Var) -> Var;

    /// Unclamped inference on a batch.
    fn upscale_tensor(&self, x: &Tensor) -> Tensor {
        let g = Graph::inference();
        self.forward_graph(&g, &g.constant(x.clone())).into_tensor()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrArch {
    pub num_blocks: usize,
    pub channels: usize,
    pub growth_channels: usize,
    pub ratio: usize,
    /// Zero the output conv so a fresh model equals its bicubic base path.
    pub zero_init_last: bool,
}

impl Default for SrArch {
    fn default() -> Self {
        Self::desk()
    }
}

impl SrArch {
    pub fn desk() -> Self {
        Self {
            num_blocks: 4,
            channels: 32,
            growth_channels: 16,
            ratio: 4,
            zero_init_last: true,
        }
    }

    pub fn full() -> Self {
        Self {
            num_blocks: 23,
            channels: 64,
            growth_channels: 32,
            ratio: 4,
            zero_init_last: true,
        }
    }

    /// Upsampling stages: factors of two, then any odd remainder.
    pub fn up_factors(&self) -> Vec<usize> {
        let mut r = self.ratio;
        let mut out = Vec::new();
        while r % 2 == 0 && r > 1 {
            out.push(2);
            r /= 2;
        }
        if r > 1 {
            out.push(r);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Rdb {
    pub convs: Vec<Conv2d>,
}

impl Rdb {
    fn new<R: Rng + ?Sized>(nf: usize, gc: usize, rng: &mut R) -> Self {
        let mut convs = Vec::with_capacity(5);
        for i in 0..4 {
            convs.push(Conv2d::new(nf + i * gc, gc, 3, SLOPE, 0.1, rng));
        }
        convs.push(Conv2d::new(nf + 4 * gc, nf, 3, SLOPE, 0.1, rng));
        Self { convs }
    }

    fn forward(&self, g: &Graph, x: &Var) -> Var {
        let mut feats = vec![x.clone()];
        for c in &self.convs[..4] {
            let refs: Vec<&Var> = feats.iter().collect();
            let inp = g.concat(&refs);
            feats.push(g.leaky_relu(&c.forward(g, &inp), SLOPE));
        }
        let refs: Vec<&Var> = feats.iter().collect();
        let out = self.convs[4].forward(g, &g.concat(&refs));
        g.add(x, &g.scale(&out, RESIDUAL_SCALE))
    }
}

impl Module for Rdb {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor>)) {
        self.convs.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor>)) {
        self.convs.visit_mut(prefix, f)
    }
}

#[derive(Clone, Debug)]
pub struct Rrdb {
    pub rdbs: Vec<Rdb>,
}

impl Rrdb {
    fn forward(&self, g: &Graph, x: &Var) -> Var {
        let mut h = x.clone();
        for r in &self.rdbs {
            h = r.forward(g, &h);
        }
        g.add(x, &g.scale(&h, RESIDUAL_SCALE))
    }
}

impl Module for Rrdb {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor>)) {
        self.rdbs.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor>)) {
        self.rdbs.visit_mut(prefix, f)
    }
}

#[derive(Clone, Debug)]
pub struct SrModel {
    pub arch: SrArch,
    pub conv_first: Conv2d,
    pub blocks: Vec<Rrdb>,
    pub trunk_conv: Conv2d,
    pub ups: Vec<Conv2d>,
    pub hr_conv: Conv2d,
    pub conv_last: Conv2d,
}

impl SrModel {
    pub fn new(arch: SrArch, seed: u64) -> Result<Self> {
        if arch.ratio < 2 {
            return Err(Error::invalid("srnet", format!("upscale ratio {} must be at least 2", arch.ratio)));
        }
        if arch.channels == 0 || arch.growth_channels == 0 {
            return Err(Error::invalid("srnet", "channel counts must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nf, gc) = (arch.channels, arch.growth_channels);
        let conv_first = Conv2d::new(3, nf, 3, SLOPE, 1.0, &mut rng);
        let blocks = (0..arch.num_blocks)
            .map(|_| Rrdb {
                rdbs: (0..3).map(|_| Rdb::new(nf, gc, &mut rng)).collect(),
            })
            .collect();
        let trunk_conv = Conv2d::new(nf, nf, 3, SLOPE, 1.0, &mut rng);
        let ups = arch
            .up_factors()
            .iter()
            .map(|_| Conv2d::new(nf, nf, 3, SLOPE, 1.0, &mut rng))
            .collect();
        let hr_conv = Conv2d::new(nf, nf, 3, SLOPE, 1.0, &mut rng);
        let conv_last = if arch.zero_init_last {
            Conv2d::zeros(nf, 3, 3)
        } else {
            Conv2d::new(nf, 3, 3, SLOPE, 1.0, &mut rng)
        };
        Ok(Self {
            arch,
            conv_first,
            blocks,
            trunk_conv,
            ups,
            hr_conv,
            conv_last,
        })
    }

    /// Convolution layers with their input scale relative to the model
    /// input, in execution order.
    pub fn layer_descs(&self) -> Vec<LayerDesc> {
        let mut out = vec![LayerDesc::conv(&self.conv_first, 1, 1)];
        for b in &self.blocks {
            for r in &b.rdbs {
                out.extend(r.convs.iter().map(|c| LayerDesc::conv(c, 1, 1)));
            }
        }
        out.push(LayerDesc::conv(&self.trunk_conv, 1, 1));
        let mut s = 1;
        for (f, c) in self.arch.up_factors().iter().zip(&self.ups) {
            s *= f;
            out.push(LayerDesc::conv(c, s, 1));
        }
        out.push(LayerDesc::conv(&self.hr_conv, s, 1));
        out.push(LayerDesc::conv(&self.conv_last, s, 1));
        out
    }

    /// Highest-channel activation width, for the planner's bytes-per-pixel.
    pub fn widest_channels(&self) -> usize {
        self.arch.channels + 4 * self.arch.growth_channels
    }

    pub fn sr_forward(&self, image: &ImageTensor) -> Result<ImageTensor> {
        sr_image(self, image)
    }
}

/// Plain bicubic upscaling; no parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BicubicSr {
    pub ratio: usize,
}

impl SrNetwork for BicubicSr {
    fn ratio(&self) -> usize {
        self.ratio
    }

    fn trf_radius(&self) -> usize {
        2
    }

    fn forward_graph(&self, g: &Graph, x: &Var) -> Var {
        let s = x.shape();
        g.resize_bicubic(x, s.h * self.ratio, s.w * self.ratio)
    }
}

/// Whole-image upscale, clamped to [-1, 1].
pub fn sr_image<M: SrNetwork + ?Sized>(model: &M, image: &ImageTensor) -> Result<ImageTensor> {
    let out = model.upscale_tensor(image.tensor());
    if !out.all_finite() {
        return Err(Error::NonFinite {
            module: "srnet",
            what: "super-resolution forward".into(),
        });
    }
    ImageTensor::new(out.clamp(-1.0, 1.0))
}

impl SrNetwork for SrModel {
    fn ratio(&self) -> usize {
        self.arch.ratio
    }

    fn trf_radius(&self) -> usize {
        rrdb_trf_radius(&self.arch)
    }

    fn forward_graph(&self, g: &Graph, x: &Var) -> Var {
        let s = x.shape();
        let r = self.arch.ratio;
        let fea = self.conv_first.forward(g, x);
        let mut trunk = fea.clone();
        for b in &self.blocks {
            trunk = b.forward(g, &trunk);
        }
        let trunk = self.trunk_conv.forward(g, &trunk);
        let mut h = g.add(&fea, &trunk);
        for (f, c) in self.arch.up_factors().iter().zip(&self.ups) {
            let up = g.upsample_nearest(&h, *f);
            h = g.leaky_relu(&c.forward(g, &up), SLOPE);
        }
        let h = g.leaky_relu(&self.hr_conv.forward(g, &h), SLOPE);
        let res = self.conv_last.forward(g, &h);
        let base = g.resize_bicubic(x, s.h * r, s.w * r);
        g.add(&base, &res)
    }
}

impl Module for SrModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor>)) {
        self.conv_first.visit(&nn::join(prefix, "conv_first"), f);
        self.blocks.visit(&nn::join(prefix, "blocks"), f);
        self.trunk_conv.visit(&nn::join(prefix, "trunk_conv"), f);
        self.ups.visit(&nn::join(prefix, "ups"), f);
        self.hr_conv.visit(&nn::join(prefix, "hr_conv"), f);
        self.conv_last.visit(&nn::join(prefix, "conv_last"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor>)) {
        self.conv_first.visit_mut(&nn::join(prefix, "conv_first"), f);
        self.blocks.visit_mut(&nn::join(prefix, "blocks"), f);
        self.trunk_conv.visit_mut(&nn::join(prefix, "trunk_conv"), f);
        self.ups.visit_mut(&nn::join(prefix, "ups"), f);
        self.hr_conv.visit_mut(&nn::join(prefix, "hr_conv"), f);
        self.conv_last.visit_mut(&nn::join(prefix, "conv_last"), f);
    }
}

/// Receptive-field radius of the architecture, by pulling an output pixel's
/// dependency interval back through every layer along one axis.
pub fn rrdb_trf_radius(arch: &SrArch) -> usize {
    let r = arch.ratio as i64;
    let lr_convs = (2 + 15 * arch.num_blocks) as i64;
    let factors = arch.up_factors();
    // interior LR column far from both borders
    let len = (4 * lr_convs + 64) as usize;
    let k = (len / 2) as i64;
    let base = bicubic_axis(len, len * arch.ratio);
    let mut radius = 0i64;
    for o in r * k..r * k + r {
        // hr_conv and conv_last
        let (mut lo, mut hi) = (o - 2, o + 2);
        for &f in factors.iter().rev() {
            lo -= 1;
            hi += 1;
            lo = lo.div_euclid(f as i64);
            hi = hi.div_euclid(f as i64);
        }
        lo -= lr_convs;
        hi += lr_convs;
        for &(i, _) in base.taps(o as usize) {
            lo = lo.min(i as i64);
            hi = hi.max(i as i64);
        }
        radius = radius.max(k - lo).max(hi - k);
    }
    radius as usize
}

/// Image plus Gaussian noise of standard deviation `sigma`, clamped.
pub fn add_noise<R: Rng + ?Sized>(image: &ImageTensor, sigma: f32, rng: &mut R) -> ImageTensor {
    if sigma == 0.0 {
        return image.clone();
    }
    let mut t = image.tensor().clone();
    for v in t.data_mut() {
        let n: f32 = StandardNormal.sample(&mut *rng);
        *v = (*v + sigma * n).clamp(-1.0, 1.0);
    }
    ImageTensor::new(t).expect("shape preserved")
}

/// Simplified blind degradation: optional Gaussian blur, bicubic
/// downscale, additive Gaussian noise. Noise levels are in [0, 1]
/// intensity units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationSpec {
    pub blur_prob: f32,
    pub blur_sigma: (f32, f32),
    pub noise_sigma: (f32, f32),
    pub hflip: bool,
    pub vflip: bool,
    pub gt_patch: usize,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            blur_prob: 0.5,
            blur_sigma: (0.2, 2.0),
            noise_sigma: (0.0, 5.0 / 255.0),
            hflip: true,
            vflip: true,
            gt_patch: 128,
        }
    }
}

impl DegradationSpec {
    pub fn clean(gt_patch: usize) -> Self {
        Self {
            blur_prob: 0.0,
            noise_sigma: (0.0, 0.0),
            hflip: false,
            vflip: false,
            gt_patch,
            ..Default::default()
        }
    }

    /// Degrades an `[n, 3, H, W]` batch to `[n, 3, H/r, W/r]`.
    pub fn degrade<R: Rng + ?Sized>(&self, hr: &Tensor, r: usize, rng: &mut R) -> Tensor {
        let s = hr.shape();
        let mut x = hr.clone();
        if self.blur_prob > 0.0 && rng.random::<f32>() < self.blur_prob {
            let (lo, hi) = self.blur_sigma;
            let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };
            x = gaussian_blur(&x, sigma);
        }
        let mut lr = resize_bicubic(&x, s.h / r, s.w / r);
        let (lo, hi) = self.noise_sigma;
        if hi > 0.0 {
            let sigma = 2.0 * if hi > lo { rng.random_range(lo..hi) } else { lo };
            for v in lr.data_mut() {
                let n: f32 = StandardNormal.sample(&mut *rng);
                *v = (*v + sigma * n).clamp(-1.0, 1.0);
            }
        }
        lr
    }
}

fn gaussian_axis(len: usize, sigma: f32) -> AxisResampler {
    let rad = (3.0 * sigma).ceil().max(1.0) as i64;
    let w: Vec<f64> = (-rad..=rad)
        .map(|d| (-(d * d) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let total: f64 = w.iter().sum();
    let taps = (0..len as i64)
        .map(|o| {
            let mut acc: Vec<(u32, f32)> = Vec::new();
            for (j, d) in (-rad..=rad).enumerate() {
                let i = (o + d).clamp(0, len as i64 - 1) as u32;
                let wv = (w[j] / total) as f32;
                match acc.iter_mut().find(|e| e.0 == i) {
                    Some(e) => e.1 += wv,
                    None => acc.push((i, wv)),
                }
            }
            acc
        })
        .collect();
    AxisResampler::from_taps(len, len, taps)
}

pub fn gaussian_blur(x: &Tensor, sigma: f32) -> Tensor {
    let s = x.shape();
    crate::kernels::resample(x, &gaussian_axis(s.h, sigma), &gaussian_axis(s.w, sigma))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialLoss {
    /// Relativistic average, used with the RRDB generator.
    Relativistic,
    /// Plain non-saturating loss.
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrTrainConfig {
    pub warmup_steps: usize,
    pub adversarial_steps: usize,
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub betas: (f32, f32),
    /// Decay points as fractions of each phase's length.
    pub schedule_fractions: Vec<f64>,
    pub schedule_ratio: f32,
    pub perceptual_weight: f32,
    pub recon_weight: f32,
    pub adv_weight: f32,
    pub gradient_clip: f64,
    pub adversarial_loss: AdversarialLoss,
    pub noise_sigma: f32,
    pub degradation: DegradationSpec,
    pub disc_channels: usize,
}

impl Default for SrTrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 100_000,
            adversarial_steps: 100_000,
            finetune_steps: 2000,
            batch_size: 16,
            learning_rate: 1e-4,
            betas: (0.9, 0.999),
            schedule_fractions: vec![0.3, 0.6, 0.9],
            schedule_ratio: 0.5,
            perceptual_weight: 1.0,
            recon_weight: 0.01,
            adv_weight: 0.005,
            gradient_clip: 0.0,
            adversarial_loss: AdversarialLoss::Relativistic,
            noise_sigma: 0.1,
            degradation: DegradationSpec::default(),
            disc_channels: 32,
        }
    }
}

impl SrTrainConfig {
    /// Loss weights for the plain-GAN path.
    pub fn vanilla_weights(mut self) -> Self {
        self.adversarial_loss = AdversarialLoss::Vanilla;
        self.perceptual_weight = 1.0;
        self.recon_weight = 1.0;
        self.adv_weight = 0.1;
        self
    }

    pub fn schedule(&self, steps: usize) -> MultiStepLr {
        MultiStepLr {
            base: self.learning_rate,
            milestones: self
                .schedule_fractions
                .iter()
                .map(|f| (f * steps as f64).round() as usize)
                .collect(),
            gamma: self.schedule_ratio,
        }
    }
}

/// Patch discriminator with average-pool downsampling.
#[derive(Clone, Debug)]
pub struct SrDiscriminator {
    pub convs: Vec<Conv2d>,
}

impl SrDiscriminator {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = channels.max(1);
        Self {
            convs: vec![
                Conv2d::new(3, c, 3, SLOPE, 1.0, &mut rng),
                Conv2d::new(c, c, 3, SLOPE, 1.0, &mut rng),
                Conv2d::new(c, c, 3, SLOPE, 1.0, &mut rng),
                Conv2d::new(c, 1, 3, SLOPE, 1.0, &mut rng),
            ],
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let n = self.convs.len();
        let mut h = x.clone();
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(g, &h);
            if i + 1 < n {
                if i > 0 && h.shape().h >= 2 && h.shape().w >= 2 {
                    h = g.avg_pool(&h, 2);
                }
                h = g.leaky_relu(&h, SLOPE);
            }
        }
        h
    }
}

impl Module for SrDiscriminator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor>)) {
        self.convs.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor>)) {
        self.convs.visit_mut(prefix, f)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SrStepRecord {
    pub recon: f64,
    pub perceptual: f64,
    pub adv: f64,
    pub d_loss: f64,
    pub lr: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Warmup,
    Adversarial,
}

/// One `(lr, hr)` batch: random image, random crop, flips, degradation.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &[ImageTensor],
    cfg: &SrTrainConfig,
    ratio: usize,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let gt = cfg.degradation.gt_patch - cfg.degradation.gt_patch % ratio;
    if dataset.is_empty() {
        return Err(Error::invalid("srnet", "training set is empty"));
    }
    if gt == 0 {
        return Err(Error::invalid("srnet", "gt patch is smaller than the upscale ratio"));
    }
    let mut crops = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size.max(1) {
        let img = &dataset[rng.random_range(0..dataset.len())];
        let (h, w) = img.size();
        if h < gt || w < gt {
            return Err(Error::invalid(
                "srnet",
                format!("image {h}x{w} is smaller than the {gt} px training patch"),
            ));
        }
        let y0 = rng.random_range(0..=h - gt);
        let x0 = rng.random_range(0..=w - gt);
        let mut c = img.tensor().crop(y0, x0, gt, gt);
        if cfg.degradation.hflip && rng.random::<bool>() {
            c = c.flip_horizontal();
        }
        if cfg.degradation.vflip && rng.random::<bool>() {
            c = c.flip_vertical();
        }
        crops.push(c);
    }
    let hr = Tensor::stack(&crops);
    let lr = cfg.degradation.degrade(&hr, ratio, rng);
    Ok((lr, hr))
}

fn mean_broadcast(g: &Graph, v: &Var) -> Var {
    g.broadcast_to(&g.mean(v), v.shape())
}

/// Generator and discriminator adversarial losses from critic logits.
fn adversarial_losses(g: &Graph, kind: AdversarialLoss, c_sr: &Var, c_hr: &Var) -> (Var, Var) {
    match kind {
        AdversarialLoss::Relativistic => {
            let rel_hr = g.sub(c_hr, &mean_broadcast(g, c_sr));
            let rel_sr = g.sub(c_sr, &mean_broadcast(g, c_hr));
            // BCE(rel_hr, 0) + BCE(rel_sr, 1) for G; the converse for D
            let lg = g.add(&g.mean(&g.softplus(&rel_hr)), &g.mean(&g.softplus(&g.neg(&rel_sr))));
            let ld = g.add(&g.mean(&g.softplus(&g.neg(&rel_hr))), &g.mean(&g.softplus(&rel_sr)));
            (g.scale(&lg, 0.5), g.scale(&ld, 0.5))
        }
        AdversarialLoss::Vanilla => {
            let lg = g.mean(&g.softplus(&g.neg(c_sr)));
            let ld = g.add(&g.mean(&g.softplus(&g.neg(c_hr))), &g.mean(&g.softplus(c_sr)));
            (lg, ld)
        }
    }
}

fn check(v: f64, phase: &str, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged {
            module: "srnet",
            stage: phase.to_string(),
            step,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    model: &mut SrModel,
    disc: &mut SrDiscriminator,
    dataset: &[ImageTensor],
    cfg: &SrTrainConfig,
    phase: Phase,
    steps: usize,
    extractor: &dyn FeatureExtractor,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SrStepRecord>> {
    let name = match phase {
        Phase::Warmup => "warmup",
        Phase::Adversarial => "adversarial",
    };
    let sched = cfg.schedule(steps);
    let mut opt_g = Adam::new(cfg.betas.0, cfg.betas.1);
    let mut opt_d = Adam::new(cfg.betas.0, cfg.betas.1);
    let r = model.arch.ratio;
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let lr_rate = sched.lr_at(step);
        let (lr, hr) = sample_batch(dataset, cfg, r, rng)?;
        let g = Graph::new();
        let sr = model.forward_graph(&g, &g.constant(lr));
        let hr_v = g.constant(hr.clone());
        let recon = g.l1(&sr, &hr_v);
        let mut rec = SrStepRecord {
            recon: check(recon.value().item() as f64, name, step)?,
            lr: lr_rate,
            ..Default::default()
        };
        let loss = match phase {
            Phase::Warmup => recon.clone(),
            Phase::Adversarial => {
                let hr_feats = {
                    let e = Graph::inference();
                    extractor
                        .forward_taps(&e, &e.constant(hr.clone()))
                        .into_iter()
                        .map(|v| v.into_tensor())
                        .collect::<Vec<_>>()
                };
                let sr_feats = extractor.forward_taps(&g, &sr);
                let mut perc = g.constant(Tensor::scalar(0.0));
                for (fs, fh) in sr_feats.iter().zip(hr_feats) {
                    perc = g.add(&perc, &g.l1(fs, &g.constant(fh)));
                }
                let c_sr = disc.forward(&g, &sr);
                let c_hr = g.constant(disc.forward(&Graph::inference(), &hr_v).into_tensor());
                let (lg, _) = adversarial_losses(&g, cfg.adversarial_loss, &c_sr, &c_hr);
                rec.perceptual = check(perc.value().item() as f64, name, step)?;
                rec.adv = check(lg.value().item() as f64, name, step)?;
                let l = g.add(&g.scale(&perc, cfg.perceptual_weight), &g.scale(&lg, cfg.adv_weight));
                g.add(&l, &g.scale(&recon, cfg.recon_weight))
            }
        };
        check(loss.value().item() as f64, name, step)?;
        let sr_t = sr.value().clone();
        let mut grads = nn::module_grads(&g, &loss, &[&*model]).remove(0);
        drop(g);
        nn::clip_grad_norm(&mut grads, cfg.gradient_clip);
        opt_g.step(model, &grads, lr_rate);

        if phase == Phase::Adversarial {
            let g = Graph::new();
            let c_sr = disc.forward(&g, &g.constant(sr_t));
            let c_hr = disc.forward(&g, &g.constant(hr));
            let (_, ld) = adversarial_losses(&g, cfg.adversarial_loss, &c_sr, &c_hr);
            rec.d_loss = check(ld.value().item() as f64, name, step)?;
            let mut dg = nn::module_grads(&g, &ld, &[&*disc]).remove(0);
            drop(g);
            nn::clip_grad_norm(&mut dg, cfg.gradient_clip);
            opt_d.step(disc, &dg, lr_rate);
        }
        log.push(rec);
    }
    Ok(log)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SrTrainReport {
    pub warmup: Vec<SrStepRecord>,
    pub adversarial: Vec<SrStepRecord>,
    pub finetune: Vec<SrStepRecord>,
}

/// Reconstruction-only warmup.
pub fn pretrain_warmup(
    model: &mut SrModel,
    dataset: &[ImageTensor],
    cfg: &SrTrainConfig,
    seed: u64,
) -> Result<Vec<SrStepRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut disc = SrDiscriminator::new(1, 0);
    run_phase(
        model,
        &mut disc,
        dataset,
        cfg,
        Phase::Warmup,
        cfg.warmup_steps,
        &crate::metrics::RandomFeatureNet::desk(),
        &mut rng,
    )
}

/// Perceptual + adversarial + reconstruction phase.
pub fn pretrain_adversarial(
    model: &mut SrModel,
    dataset: &[ImageTensor],
    cfg: &SrTrainConfig,
    extractor: &dyn FeatureExtractor,
    seed: u64,
) -> Result<Vec<SrStepRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut disc = SrDiscriminator::new(cfg.disc_channels, seed ^ 0xd15c);
    run_phase(
        model,
        &mut disc,
        dataset,
        cfg,
        Phase::Adversarial,
        cfg.adversarial_steps,
        extractor,
        &mut rng,
    )
}

/// Both pre-training phases over a multi-image training set.
pub fn pretrain(
    model: &mut SrModel,
    dataset: &[ImageTensor],
    cfg: &SrTrainConfig,
    extractor: &dyn FeatureExtractor,
    seed: u64,
) -> Result<SrTrainReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("srnet", "training set is empty"));
    }
    let warmup = pretrain_warmup(model, dataset, cfg, seed)?;
    let adversarial = pretrain_adversarial(model, dataset, cfg, extractor, seed.wrapping_add(1))?;
    Ok(SrTrainReport {
        warmup,
        adversarial,
        finetune: Vec::new(),
    })
}

/// Adapts a pre-trained model to crops of a single image.
pub fn finetune(
    model: &mut SrModel,
    train_image: &ImageTensor,
    cfg: &SrTrainConfig,
    extractor: &dyn FeatureExtractor,
    seed: u64,
) -> Result<Vec<SrStepRecord>> {
    let gt = cfg.degradation.gt_patch;
    let (h, w) = train_image.size();
    if h < gt || w < gt {
        return Err(Error::invalid(
            "srnet",
            format!("image {h}x{w} is smaller than the {gt} px training patch"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut disc = SrDiscriminator::new(cfg.disc_channels, seed ^ 0xd15c);
    run_phase(
        model,
        &mut disc,
        std::slice::from_ref(train_image),
        cfg,
        Phase::Adversarial,
        cfg.finetune_steps,
        extractor,
        &mut rng,
    )
}

/// Shape check helper for callers holding raw tensors.
pub fn expected_output(shape: Shape, ratio: usize) -> Shape {
    Shape::new(shape.n, shape.c, shape.h * ratio, shape.w * ratio)
}
