//! Coarse-to-fine cascade that synthesises the low-resolution global
//! structure: a patch VAE at the coarsest scales followed by patch-GAN
//! refiners. Every convolution sees one extra vertical-coordinate channel.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::nn::{self, Adam, Conv2d, Module};
use crate::pyramid::{build_pyramid, PyramidSchedule};
use crate::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

const SLOPE: f32 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalConfig {
    pub iterations_per_scale: usize,
    pub intermediate_layers: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub batch_size: usize,
    pub encoder_blocks: usize,
    pub latent_channels: usize,
    pub betas: (f32, f32),
    pub learning_rate: f32,
    pub gradient_clip: f64,
    pub recon_weight: f32,
    pub kl_weight: f32,
    pub adv_weight: f32,
    pub gp_weight: f32,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            iterations_per_scale: 5000,
            intermediate_layers: 5,
            channels: 64,
            kernel_size: 3,
            batch_size: 2,
            encoder_blocks: 2,
            latent_channels: 3,
            betas: (0.5, 0.999),
            learning_rate: 5e-4,
            gradient_clip: 5.0,
            recon_weight: 10.0,
            kl_weight: 1.0,
            adv_weight: 1.0,
            gp_weight: 10.0,
        }
    }
}

/// Row-coordinate channel for a map of height `h`: `-1 + 2i/(h-1)`, or 0
/// when `h == 1`.
pub fn vertical_coords(n: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(Shape::new(n, 1, h, w), |_, _, y, _| {
        if h > 1 {
            // correctly rounded (2y - (h-1)) / (h-1)
            (((2 * y) as f64 - (h - 1) as f64) / (h - 1) as f64) as f32
        } else {
            0.0
        }
    })
}

/// `x` with one appended vertical-coordinate channel.
pub fn append_vertical_coords(x: &Tensor) -> Tensor {
    let s = x.shape();
    crate::kernels::concat_channels(&[x, &vertical_coords(s.n, s.h, s.w)])
}

fn coord_var(g: &Graph, x: &Var) -> Var {
    let s = x.shape();
    let c = g.constant(vertical_coords(s.n, s.h, s.w));
    g.concat(&[x, &c])
}

/// Convolution over `features + 1` inputs, the last being the row coordinate.
#[derive(Clone, Debug)]
pub struct CoordConv {
    pub conv: Conv2d,
}

impl CoordConv {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, scale: f32, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(cin + 1, cout, k, SLOPE, scale, rng),
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.conv.in_channels() - 1
    }

    fn forward(&self, g: &Graph, x: &Var, trace: &mut Option<Vec<Tensor>>) -> Var {
        let xc = coord_var(g, x);
        if let Some(t) = trace {
            t.push(xc.value().clone());
        }
        self.conv.forward(g, &xc)
    }
}

impl Module for CoordConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor>)) {
        self.conv.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor>)) {
        self.conv.visit_mut(prefix, f)
    }
}

/// Plain stack of coord-convs with leaky ReLUs between them.
#[derive(Clone, Debug)]
pub struct ConvNet {
    pub layers: Vec<CoordConv>,
    pub tanh_output: bool,
}

impl ConvNet {
    /// Head, `intermediate` hidden layers and a tail.
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        channels: usize,
        cout: usize,
        intermediate: usize,
        k: usize,
        tanh_output: bool,
        rng: &mut R,
    ) -> Self {
        let mut layers = vec![CoordConv::new(cin, channels, k, 1.0, rng)];
        for _ in 0..intermediate {
            layers.push(CoordConv::new(channels, channels, k, 1.0, rng));
        }
        let tail_scale = if tanh_output { 0.1 } else { 1.0 };
        layers.push(CoordConv::new(channels, cout, k, tail_scale, rng));
        Self { layers, tanh_output }
    }

    /// One coord-conv, optionally followed by tanh.
    pub fn single<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, tanh_output: bool, rng: &mut R) -> Self {
        Self {
            layers: vec![CoordConv::new(cin, cout, k, 1.0, rng)],
            tanh_output,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        self.forward_traced(g, x, &mut None)
    }

    /// Forward pass that also records every convolution's actual input.
    pub fn forward_traced(&self, g: &Graph, x: &Var, trace: &mut Option<Vec<Tensor>>) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, &h, trace);
            if i < last {
                h = g.leaky_relu(&h, SLOPE);
            }
        }
        if self.tanh_output {
            g.tanh(&h)
        } else {
            h
        }
    }
}

impl Module for ConvNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor>)) {
        self.layers.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor>)) {
        self.layers.visit_mut(prefix, f)
    }
}

/// Scale-0 posterior network: shared trunk plus mean and log-variance heads.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<CoordConv>,
    pub mu: CoordConv,
    pub logvar: CoordConv,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: &GlobalConfig, rng: &mut R) -> Self {
        let k = cfg.kernel_size;
        let mut blocks = Vec::new();
        let mut cin = 3;
        for _ in 0..cfg.encoder_blocks.max(1) {
            blocks.push(CoordConv::new(cin, cfg.channels, k, 1.0, rng));
            cin = cfg.channels;
        }
        Self {
            blocks,
            mu: CoordConv::new(cin, cfg.latent_channels, k, 0.1, rng),
            logvar: CoordConv::new(cin, cfg.latent_channels, k, 0.1, rng),
        }
    }

    fn forward(&self, g: &Graph, x: &Var, trace: &mut Option<Vec<Tensor>>) -> (Var, Var) {
        let mut h = x.clone();
        for b in &self.blocks {
            h = g.leaky_relu(&b.forward(g, &h, trace), SLOPE);
        }
        (self.mu.forward(g, &h, trace), self.logvar.forward(g, &h, trace))
    }
}

impl Module for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor>)) {
        self.blocks.visit(&nn::join(prefix, "blocks"), f);
        self.mu.visit(&nn::join(prefix, "mu"), f);
        self.logvar.visit(&nn::join(prefix, "logvar"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor>)) {
        self.blocks.visit_mut(&nn::join(prefix, "blocks"), f);
        self.mu.visit_mut(&nn::join(prefix, "mu"), f);
        self.logvar.visit_mut(&nn::join(prefix, "logvar"), f);
    }
}

#[derive(Clone, Debug)]
pub struct LatentCode {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub sample: Tensor,
}

/// Mean-per-element KL(N(mu, exp(logvar)) || N(0, 1)).
pub fn gaussian_kl(mu: &Tensor, logvar: &Tensor) -> f64 {
    mu.data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| 0.5 * ((m as f64).powi(2) + (lv as f64).exp() - 1.0 - lv as f64))
        .sum::<f64>()
        / mu.numel().max(1) as f64
}

fn kl_var(g: &Graph, mu: &Var, logvar: &Var) -> Var {
    // 0.5 * (mu^2 + exp(lv) - 1 - lv)
    let t = g.sub(&g.add(&g.square(mu), &g.exp(logvar)), logvar);
    g.scale(&g.mean(&g.add_scalar(&t, -1.0)), 0.5)
}

fn reparameterise(g: &Graph, mu: &Var, logvar: &Var, eps: &Tensor) -> Var {
    let std = g.exp(&g.scale(logvar, 0.5));
    let e = g.constant(eps.clone());
    g.add(mu, &g.mul(&std, &e))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StepRecord {
    pub recon: f64,
    pub recon0: f64,
    pub kl: f64,
    pub adv: f64,
    pub gp: f64,
    pub d_loss: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ScaleReport {
    pub scale: usize,
    pub gan: bool,
    pub noise_amplitude: f32,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub scales: Vec<ScaleReport>,
}

#[derive(Clone, Debug)]
pub struct CascadeState {
    pub schedule: PyramidSchedule,
    pub config: GlobalConfig,
    pub encoder: Encoder,
    pub generators: Vec<ConvNet>,
    /// `Some` only at GAN scales.
    pub discriminators: Vec<Option<ConvNet>>,
    pub noise_amplitudes: Vec<f32>,
    /// Number of scales whose training has finished.
    pub trained_scales: usize,
}

impl CascadeState {
    pub fn new(schedule: PyramidSchedule, config: GlobalConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ch, k, li) = (config.channels, config.kernel_size, config.intermediate_layers);
        let encoder = Encoder::new(&config, &mut rng);
        let n = schedule.num_generators();
        let mut generators = Vec::with_capacity(n);
        let mut discriminators = Vec::with_capacity(n);
        for m in 0..n {
            let cin = if m == 0 { config.latent_channels } else { 3 };
            generators.push(ConvNet::new(cin, ch, 3, li, k, true, &mut rng));
            discriminators.push(
                schedule
                    .is_gan_scale(m)
                    .then(|| ConvNet::new(3, ch, 1, li, k, false, &mut rng)),
            );
        }
        Self {
            schedule,
            config,
            encoder,
            generators,
            discriminators,
            noise_amplitudes: vec![0.0; n],
            trained_scales: 0,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained_scales == self.schedule.num_generators()
    }

    /// Named networks, in checkpoint order.
    pub fn networks(&self) -> Vec<(String, &dyn Module)> {
        let mut out: Vec<(String, &dyn Module)> = vec![("encoder".into(), &self.encoder)];
        for (m, gnet) in self.generators.iter().enumerate() {
            out.push((format!("g{m}"), gnet));
        }
        for (m, d) in self.discriminators.iter().enumerate() {
            if let Some(d) = d {
                out.push((format!("d{m}"), d));
            }
        }
        out
    }

    pub fn networks_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        let mut out: Vec<(String, &mut dyn Module)> = vec![("encoder".into(), &mut self.encoder)];
        for (m, gnet) in self.generators.iter_mut().enumerate() {
            out.push((format!("g{m}"), gnet));
        }
        for (m, d) in self.discriminators.iter_mut().enumerate() {
            if let Some(d) = d {
                out.push((format!("d{m}"), d));
            }
        }
        out
    }

    /// Every coord-conv in the step-one networks: `(network, feature
    /// channels, total input channels)`.
    pub fn conv_audit(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut push = |name: &str, l: &CoordConv| {
            out.push((name.to_string(), l.feature_channels(), l.conv.in_channels()))
        };
        for b in &self.encoder.blocks {
            push("encoder", b);
        }
        push("encoder", &self.encoder.mu);
        push("encoder", &self.encoder.logvar);
        for (m, gn) in self.generators.iter().enumerate() {
            gn.layers.iter().for_each(|l| push(&format!("g{m}"), l));
        }
        for (m, d) in self.discriminators.iter().enumerate() {
            if let Some(d) = d {
                d.layers.iter().for_each(|l| push(&format!("d{m}"), l));
            }
        }
        out
    }

    pub fn latent_shape(&self, n: usize) -> Shape {
        let (h, w) = self.schedule.resolutions[0];
        Shape::new(n, self.config.latent_channels, h, w)
    }

    pub fn encode(&self, x0: &ImageTensor, eps: Option<&Tensor>) -> Result<LatentCode> {
        if x0.size() != self.schedule.resolutions[0] {
            return Err(Error::invalid(
                "global_generator",
                format!("encoder expects scale-0 size {:?}", self.schedule.resolutions[0]),
            ));
        }
        let g = Graph::inference();
        let (mu, lv) = self
            .encoder
            .forward(&g, &g.constant(x0.tensor().clone()), &mut None);
        let sample = match eps {
            Some(e) => reparameterise(&g, &mu, &lv, e).into_tensor(),
            None => mu.value().clone(),
        };
        let code = LatentCode {
            mu: mu.into_tensor(),
            logvar: lv.into_tensor(),
            sample,
        };
        if !(code.mu.all_finite() && code.logvar.all_finite()) {
            return Err(Error::NonFinite {
                module: "global_generator",
                what: "encoding".into(),
            });
        }
        Ok(code)
    }

    /// `x̃_0 .. x̃_upto` for a batch, starting from `z0`.
    fn cascade(&self, g: &Graph, z0: &Var, noise: &[Option<Var>], upto: usize) -> Vec<Var> {
        let mut outs = vec![self.generators[0].forward(g, z0)];
        for m in 1..=upto {
            let (h, w) = self.schedule.resolutions[m];
            let up = g.resize_bicubic(&outs[m - 1], h, w);
            let input = match noise.get(m).and_then(|n| n.as_ref()) {
                Some(z) if self.schedule.is_gan_scale(m) => g.add(&up, z),
                _ => up.clone(),
            };
            let res = self.generators[m].forward(g, &input);
            outs.push(g.add(&up, &res));
        }
        outs
    }

    /// Deterministic cascade evaluation. `noises[0]` is the scale-0 latent;
    /// GAN-scale entries are additive noise maps (`None` means zero).
    pub fn forward_cascade(&self, noises: &[Option<Tensor>]) -> Result<Vec<ImageTensor>> {
        let n = self.schedule.num_generators();
        if noises.len() != n {
            return Err(Error::invalid(
                "global_generator",
                format!("expected {n} noise entries, got {}", noises.len()),
            ));
        }
        let z0 = noises[0]
            .as_ref()
            .ok_or_else(|| Error::invalid("global_generator", "scale-0 latent is required"))?;
        if z0.shape() != self.latent_shape(1) {
            return Err(Error::invalid(
                "global_generator",
                format!("latent shape {:?} != {:?}", z0.shape(), self.latent_shape(1)),
            ));
        }
        for m in 1..n {
            if let Some(z) = &noises[m] {
                let (h, w) = self.schedule.resolutions[m];
                if z.shape() != Shape::new(1, 3, h, w) {
                    return Err(Error::invalid(
                        "global_generator",
                        format!("noise at scale {m} has shape {:?}, expected [1, 3, {h}, {w}]", z.shape()),
                    ));
                }
            }
        }
        let g = Graph::inference();
        let noise: Vec<Option<Var>> = noises
            .iter()
            .map(|n| n.as_ref().map(|t| g.constant(t.clone())))
            .collect();
        let outs = self.cascade(&g, &g.constant(z0.clone()), &noise, n - 1);
        outs.into_iter()
            .map(|v| ImageTensor::new(v.into_tensor()))
            .collect()
    }

    /// Draws the prior latent and per-scale GAN noise for `n` samples.
    fn draw_noise<R: Rng + ?Sized>(&self, n: usize, upto: usize, rng: &mut R) -> (Tensor, Vec<Option<Tensor>>) {
        let z0 = Tensor::randn(self.latent_shape(n), 1.0, rng);
        let mut noise = vec![None];
        for m in 1..=upto {
            let (h, w) = self.schedule.resolutions[m];
            noise.push(self.schedule.is_gan_scale(m).then(|| {
                Tensor::randn(Shape::new(n, 3, h, w), self.noise_amplitudes[m], rng)
            }));
        }
        (z0, noise)
    }

    /// Noise for one free sample, in the layout [`forward_cascade`] takes.
    pub fn sample_noise(&self, seed: u64) -> Vec<Option<Tensor>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (z0, mut rest) = self.draw_noise(1, self.schedule.finest(), &mut rng);
        rest[0] = Some(z0);
        rest
    }

    /// Free sample at the base resolution, clamped to [-1, 1].
    pub fn sample(&self, seed: u64) -> Result<ImageTensor> {
        if !self.is_trained() {
            return Err(Error::invalid("global_generator", "cascade is not trained"));
        }
        let outs = self.forward_cascade(&self.sample_noise(seed))?;
        Ok(outs.last().unwrap().clamped())
    }

    /// Reconstruction of the training image: posterior mean latent and no
    /// GAN noise.
    pub fn reconstruct(&self, x0: &ImageTensor) -> Result<ImageTensor> {
        let code = self.encode(x0, None)?;
        let mut noises = vec![None; self.schedule.num_generators()];
        noises[0] = Some(code.mu);
        let outs = self.forward_cascade(&noises)?;
        Ok(outs.last().unwrap().clamped())
    }
}

fn finite_or(module_stage: usize, step: usize, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged {
            module: "global_generator",
            stage: format!("scale {module_stage}"),
            step,
        })
    }
}

fn batch_of(x: &Tensor, n: usize) -> Tensor {
    Tensor::stack(&vec![x.clone(); n])
}

/// WGAN-GP penalty `E[(||∇D(x̂)|| - 1)^2]` on random interpolates.
fn gradient_penalty(g: &Graph, d: &ConvNet, real: &Tensor, fake: &Tensor, rng: &mut ChaCha8Rng) -> Var {
    let s = fake.shape();
    let alpha: Vec<f32> = (0..s.n).map(|_| rng.random::<f32>()).collect();
    let per = s.c * s.plane();
    let mut mix = fake.clone();
    for (i, v) in mix.data_mut().iter_mut().enumerate() {
        let a = alpha[i / per];
        *v = a * real.data()[i] + (1.0 - a) * *v;
    }
    let xh = g.leaf(mix);
    let out = g.sum(&d.forward(g, &xh));
    let gx = g.grad(&out, &[&xh], true).remove(0);
    let norm = g.sqrt(&g.add_scalar(&g.sum_per_sample(&g.square(&gx)), 1e-12));
    g.mean(&g.square(&g.add_scalar(&norm, -1.0)))
}

/// Trains all scales coarsest-first.
pub fn train_first_step(
    train_image: &ImageTensor,
    state: &mut CascadeState,
    seed: u64,
) -> Result<TrainReport> {
    let targets = build_pyramid(train_image, &state.schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TrainReport::default();
    let n = state.schedule.num_generators();
    let mut opt_e = Adam::new(state.config.betas.0, state.config.betas.1);
    let mut opt_g0 = Adam::new(state.config.betas.0, state.config.betas.1);
    for m in state.trained_scales..n {
        let rep = if state.schedule.is_gan_scale(m) {
            train_gan_scale(state, &targets, m, &mut rng)?
        } else {
            train_vae_scale(state, &targets, m, &mut rng, &mut opt_e, &mut opt_g0)?
        };
        report.scales.push(rep);
        state.trained_scales = m + 1;
    }
    Ok(report)
}

fn train_vae_scale(
    state: &mut CascadeState,
    targets: &[ImageTensor],
    m: usize,
    rng: &mut ChaCha8Rng,
    opt_e: &mut Adam,
    opt_g0: &mut Adam,
) -> Result<ScaleReport> {
    let cfg = state.config.clone();
    let bs = cfg.batch_size.max(1);
    let x0 = targets[0].tensor();
    let x0_batch = batch_of(x0, bs);
    let xm_batch = batch_of(targets[m].tensor(), bs);
    let mut opt_m = Adam::new(cfg.betas.0, cfg.betas.1);
    let mut rep = ScaleReport {
        scale: m,
        gan: false,
        ..Default::default()
    };
    for step in 0..cfg.iterations_per_scale {
        let g = Graph::new();
        let (mu, lv) = state.encoder.forward(&g, &g.constant(x0.clone()), &mut None);
        let mu_b = g.broadcast_to(&mu, state.latent_shape(bs));
        let lv_b = g.broadcast_to(&lv, state.latent_shape(bs));
        let eps = Tensor::randn(state.latent_shape(bs), 1.0, rng);
        let z0 = reparameterise(&g, &mu_b, &lv_b, &eps);
        let outs = state.cascade(&g, &z0, &[], m);
        let recon0 = g.mse(&outs[0], &g.constant(x0_batch.clone()));
        let kl = kl_var(&g, &mu, &lv);
        let mut loss = g.add(&g.scale(&recon0, cfg.recon_weight), &g.scale(&kl, cfg.kl_weight));
        let recon_m = if m > 0 {
            let r = g.mse(&outs[m], &g.constant(xm_batch.clone()));
            loss = g.add(&loss, &g.scale(&r, cfg.recon_weight));
            r.value().item() as f64
        } else {
            recon0.value().item() as f64
        };
        let rec = StepRecord {
            recon: finite_or(m, step, recon_m)?,
            recon0: finite_or(m, step, recon0.value().item() as f64)?,
            kl: finite_or(m, step, kl.value().item() as f64)?,
            ..Default::default()
        };
        finite_or(m, step, loss.value().item() as f64)?;
        let mods: Vec<&dyn Module> = if m == 0 {
            vec![&state.encoder, &state.generators[0]]
        } else {
            vec![&state.encoder, &state.generators[0], &state.generators[m]]
        };
        let mut grads = nn::module_grads(&g, &loss, &mods);
        drop(g);
        for gr in grads.iter_mut() {
            nn::clip_grad_norm(gr, cfg.gradient_clip);
        }
        let lr = cfg.learning_rate;
        opt_e.step(&mut state.encoder, &grads[0], lr);
        opt_g0.step(&mut state.generators[0], &grads[1], lr);
        if m > 0 {
            opt_m.step(&mut state.generators[m], &grads[2], lr);
        }
        rep.steps.push(rec);
    }
    Ok(rep)
}

fn train_gan_scale(
    state: &mut CascadeState,
    targets: &[ImageTensor],
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ScaleReport> {
    let cfg = state.config.clone();
    let bs = cfg.batch_size.max(1);
    let (h, w) = state.schedule.resolutions[m];
    let real = targets[m].tensor().clone();
    let real_batch = batch_of(&real, bs);

    // frozen reconstruction path up to m-1, cached for the whole scale
    let prev_rec = {
        let code = state.encode(&targets[0], None)?;
        let g = Graph::inference();
        let outs = state.cascade(&g, &g.constant(code.mu), &[], m - 1);
        g.resize_bicubic(outs.last().unwrap(), h, w).into_tensor()
    };
    let sigma = {
        let d = prev_rec.zip_map(&real, |a, b| a - b);
        (d.sum_sq() / d.numel() as f64).sqrt() as f32
    };
    state.noise_amplitudes[m] = sigma;

    let mut opt_g = Adam::new(cfg.betas.0, cfg.betas.1);
    let mut opt_d = Adam::new(cfg.betas.0, cfg.betas.1);
    let mut rep = ScaleReport {
        scale: m,
        gan: true,
        noise_amplitude: sigma,
        ..Default::default()
    };
    for step in 0..cfg.iterations_per_scale {
        // fresh fake prefix from the prior through the frozen scales
        let (up_fake, z_m) = {
            let (z0, noise) = state.draw_noise(bs, m, rng);
            let g = Graph::inference();
            let nv: Vec<Option<Var>> = noise.iter().map(|n| n.as_ref().map(|t| g.constant(t.clone()))).collect();
            let outs = state.cascade(&g, &g.constant(z0), &nv, m - 1);
            let up = g.resize_bicubic(outs.last().unwrap(), h, w).into_tensor();
            (up, noise[m].clone().expect("gan scale noise"))
        };
        let gen_input = up_fake.zip_map(&z_m, |a, b| a + b);

        // discriminator step
        let fake_detached = {
            let g = Graph::inference();
            let r = state.generators[m].forward(&g, &g.constant(gen_input.clone()));
            up_fake.zip_map(r.value(), |a, b| a + b)
        };
        let d_net = state.discriminators[m].as_ref().expect("gan scale discriminator");
        let (d_loss_v, gp_v, d_grads) = {
            let g = Graph::new();
            let d_real = g.mean(&d_net.forward(&g, &g.constant(real.clone())));
            let d_fake = g.mean(&d_net.forward(&g, &g.constant(fake_detached.clone())));
            let gp = gradient_penalty(&g, d_net, &real_batch, &fake_detached, rng);
            let loss = g.add(&g.sub(&d_fake, &d_real), &g.scale(&gp, cfg.gp_weight));
            let gp_v = gp.value().item() as f64;
            let lv = loss.value().item() as f64;
            let grads = nn::module_grads(&g, &loss, &[d_net]).remove(0);
            (lv, gp_v, grads)
        };
        finite_or(m, step, d_loss_v)?;
        finite_or(m, step, gp_v)?;
        let mut d_grads = d_grads;
        nn::clip_grad_norm(&mut d_grads, cfg.gradient_clip);
        opt_d.step(state.discriminators[m].as_mut().unwrap(), &d_grads, cfg.learning_rate);

        // generator step
        let d_net = state.discriminators[m].as_ref().unwrap();
        let gnet = &state.generators[m];
        let g = Graph::new();
        let res = gnet.forward(&g, &g.constant(gen_input));
        let fake = g.add(&g.constant(up_fake), &res);
        let adv = g.neg(&g.mean(&d_net.forward(&g, &fake)));
        let rec_res = gnet.forward(&g, &g.constant(prev_rec.clone()));
        let rec = g.add(&g.constant(prev_rec.clone()), &rec_res);
        let recon = g.mse(&rec, &g.constant(real.clone()));
        let loss = g.add(&g.scale(&recon, cfg.recon_weight), &g.scale(&adv, cfg.adv_weight));
        let rec_v = finite_or(m, step, recon.value().item() as f64)?;
        let adv_v = finite_or(m, step, adv.value().item() as f64)?;
        finite_or(m, step, loss.value().item() as f64)?;
        let mut g_grads = nn::module_grads(&g, &loss, &[gnet]).remove(0);
        drop(g);
        nn::clip_grad_norm(&mut g_grads, cfg.gradient_clip);
        opt_g.step(&mut state.generators[m], &g_grads, cfg.learning_rate);

        rep.steps.push(StepRecord {
            recon: rec_v,
            recon0: 0.0,
            kl: 0.0,
            adv: adv_v,
            gp: gp_v,
            d_loss: d_loss_v,
        });
    }
    Ok(rep)
}
