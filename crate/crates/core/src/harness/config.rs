//! Run configuration, grouped like the hyperparameter tables.

use crate::error::{Error, Result};
use crate::global_generator::GlobalConfig;
use crate::image_tensor::ImageTensor;
use crate::pyramid::{build_schedule, PyramidSchedule};
use crate::resample::resize_bicubic;
use crate::srnet::{DegradationSpec, SrArch, SrTrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub first_step: FirstStep,
    pub super_resolution: SuperResolution,
    pub pipeline: Pipeline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FirstStep {
    pub basic_setting: FirstBasic,
    pub optimizer: FirstOptimizer,
    pub encoder: FirstEncoder,
    pub generator: FirstGenerator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FirstBasic {
    pub iteration_per_scale: usize,
    pub intermediate_layers: usize,
    pub channels: usize,
    /// Width the training image is resized to; 0 keeps it as loaded.
    pub gt_size: usize,
    pub kernel_size: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FirstOptimizer {
    pub betas: (f32, f32),
    pub learning_rate: f32,
    pub gradient_clip: f64,
    pub weight_of_reconstruction_loss: f32,
    pub weight_of_kl_loss: f32,
    pub weight_of_discriminator_loss: f32,
    pub weight_of_gradient_penalty: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FirstEncoder {
    pub blocks: usize,
    pub latent_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FirstGenerator {
    pub patch_vae: usize,
    pub patch_gan: usize,
    pub scale_factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuperResolution {
    pub basic_setting: SrBasic,
    pub optimizer: SrOptimizer,
    pub generator: SrGenerator,
    pub degradation: DegradationSpec,
    /// Checkpoint to fine-tune from; trains from scratch when absent.
    pub pretrained: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrBasic {
    /// Reconstruction-only iterations run before the adversarial phase
    /// when no pretrained checkpoint is given.
    pub warmup_iteration: usize,
    pub total_iteration: usize,
    pub finetune_iteration: usize,
    pub channels: usize,
    pub growth_channels: usize,
    pub gt_size: usize,
    pub batch_size: usize,
    pub discriminator_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrOptimizer {
    pub betas: (f32, f32),
    pub learning_rate: f32,
    /// Decay points as fractions of each phase.
    pub scheduling_intervals: Vec<f64>,
    pub scheduling_ratio: f32,
    pub weight_of_perceptual_loss: f32,
    pub weight_of_reconstruction_loss: f32,
    pub weight_of_adversarial_loss: f32,
    pub gradient_clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrGenerator {
    pub rrdb: usize,
    pub upscaling_ratio: usize,
    pub standard_deviation_of_random_noise: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pipeline {
    pub in_memory_sr_stages: usize,
    pub tiled_sr_stages: usize,
    /// Memory budget per tiled SR call.
    pub budget_bytes: u64,
    pub element_size: usize,
    /// Reuse one SR model for every SR stage.
    pub share_sr_weights: bool,
    pub erf_probes: usize,
    pub erf_energy: f64,
    pub extractor_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            first_step: FirstStep::default(),
            super_resolution: SuperResolution::default(),
            pipeline: Pipeline::default(),
        }
    }
}

impl Default for FirstStep {
    fn default() -> Self {
        let g = GlobalConfig::default();
        Self {
            basic_setting: FirstBasic {
                iteration_per_scale: g.iterations_per_scale,
                intermediate_layers: g.intermediate_layers,
                channels: g.channels,
                gt_size: 256,
                kernel_size: g.kernel_size,
                batch_size: g.batch_size,
            },
            optimizer: FirstOptimizer {
                betas: g.betas,
                learning_rate: g.learning_rate,
                gradient_clip: g.gradient_clip,
                weight_of_reconstruction_loss: g.recon_weight,
                weight_of_kl_loss: g.kl_weight,
                weight_of_discriminator_loss: g.adv_weight,
                weight_of_gradient_penalty: g.gp_weight,
            },
            encoder: FirstEncoder {
                blocks: g.encoder_blocks,
                latent_channels: g.latent_channels,
            },
            generator: FirstGenerator::default(),
        }
    }
}

impl Default for FirstBasic {
    fn default() -> Self {
        FirstStep::default().basic_setting
    }
}

impl Default for FirstOptimizer {
    fn default() -> Self {
        FirstStep::default().optimizer
    }
}

impl Default for FirstEncoder {
    fn default() -> Self {
        FirstStep::default().encoder
    }
}

impl Default for FirstGenerator {
    fn default() -> Self {
        Self {
            patch_vae: 3,
            patch_gan: 6,
            scale_factor: 0.75,
        }
    }
}

impl Default for SuperResolution {
    fn default() -> Self {
        let t = SrTrainConfig::default();
        let a = SrArch::full();
        Self {
            basic_setting: SrBasic {
                warmup_iteration: t.warmup_steps,
                total_iteration: t.adversarial_steps,
                finetune_iteration: t.finetune_steps,
                channels: a.channels,
                growth_channels: a.growth_channels,
                gt_size: t.degradation.gt_patch,
                batch_size: t.batch_size,
                discriminator_channels: t.disc_channels,
            },
            optimizer: SrOptimizer {
                betas: t.betas,
                learning_rate: t.learning_rate,
                scheduling_intervals: t.schedule_fractions.clone(),
                scheduling_ratio: t.schedule_ratio,
                weight_of_perceptual_loss: t.perceptual_weight,
                weight_of_reconstruction_loss: t.recon_weight,
                weight_of_adversarial_loss: t.adv_weight,
                gradient_clip: t.gradient_clip,
            },
            generator: SrGenerator {
                rrdb: a.num_blocks,
                upscaling_ratio: a.ratio,
                standard_deviation_of_random_noise: t.noise_sigma,
            },
            degradation: t.degradation,
            pretrained: None,
        }
    }
}

impl Default for SrBasic {
    fn default() -> Self {
        SuperResolution::default().basic_setting
    }
}

impl Default for SrOptimizer {
    fn default() -> Self {
        SuperResolution::default().optimizer
    }
}

impl Default for SrGenerator {
    fn default() -> Self {
        SuperResolution::default().generator
    }
}

impl Default for Pipeline {
    fn default() -> Self {
        Self {
            in_memory_sr_stages: 1,
            tiled_sr_stages: 1,
            budget_bytes: 2 << 30,
            element_size: 4,
            share_sr_weights: true,
            erf_probes: crate::erf_probe::DEFAULT_PROBES,
            erf_energy: crate::erf_probe::DEFAULT_ENERGY,
            extractor_seed: 0,
        }
    }
}

impl RunConfig {
    /// Small settings that train in minutes on one CPU core.
    pub fn desk() -> Self {
        let mut c = Self::default();
        let fs = &mut c.first_step;
        fs.basic_setting.iteration_per_scale = 300;
        fs.basic_setting.channels = 32;
        fs.basic_setting.gt_size = 64;
        fs.generator.patch_vae = 0;
        fs.generator.patch_gan = 2;
        let sr = &mut c.super_resolution;
        let a = SrArch::desk();
        sr.generator.rrdb = a.num_blocks;
        sr.basic_setting.channels = a.channels;
        sr.basic_setting.growth_channels = a.growth_channels;
        sr.basic_setting.warmup_iteration = 100;
        sr.basic_setting.total_iteration = 0;
        sr.basic_setting.finetune_iteration = 100;
        sr.basic_setting.gt_size = 64;
        sr.basic_setting.batch_size = 4;
        sr.degradation.gt_patch = 64;
        sr.optimizer.learning_rate = 2e-4;
        c.pipeline.budget_bytes = 256 << 20;
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Format(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid("config", m.to_string()));
        let fs = &self.first_step;
        if fs.basic_setting.channels == 0 || fs.basic_setting.kernel_size % 2 == 0 {
            return bad("first_step: channels must be positive and kernel_size odd");
        }
        if fs.basic_setting.batch_size == 0 {
            return bad("first_step: batch_size must be positive");
        }
        if !(fs.generator.scale_factor > 0.0 && fs.generator.scale_factor < 1.0) {
            return bad("first_step.generator.scale_factor must lie in (0, 1)");
        }
        let sr = &self.super_resolution;
        if sr.generator.upscaling_ratio < 2 {
            return bad("super_resolution.generator.upscaling_ratio must be at least 2");
        }
        if sr.basic_setting.batch_size == 0 || sr.basic_setting.gt_size % sr.generator.upscaling_ratio != 0 {
            return bad("super_resolution: batch_size must be positive and gt_size divisible by the ratio");
        }
        let p = &self.pipeline;
        if p.erf_probes == 0 || !(p.erf_energy > 0.0 && p.erf_energy <= 1.0) {
            return bad("pipeline: erf_probes must be positive and erf_energy in (0, 1]");
        }
        if p.element_size == 0 {
            return bad("pipeline.element_size must be positive");
        }
        Ok(())
    }

    pub fn global_config(&self) -> GlobalConfig {
        let fs = &self.first_step;
        GlobalConfig {
            iterations_per_scale: fs.basic_setting.iteration_per_scale,
            intermediate_layers: fs.basic_setting.intermediate_layers,
            channels: fs.basic_setting.channels,
            kernel_size: fs.basic_setting.kernel_size,
            batch_size: fs.basic_setting.batch_size,
            encoder_blocks: fs.encoder.blocks,
            latent_channels: fs.encoder.latent_channels,
            betas: fs.optimizer.betas,
            learning_rate: fs.optimizer.learning_rate,
            gradient_clip: fs.optimizer.gradient_clip,
            recon_weight: fs.optimizer.weight_of_reconstruction_loss,
            kl_weight: fs.optimizer.weight_of_kl_loss,
            adv_weight: fs.optimizer.weight_of_discriminator_loss,
            gp_weight: fs.optimizer.weight_of_gradient_penalty,
        }
    }

    pub fn sr_arch(&self) -> SrArch {
        let sr = &self.super_resolution;
        SrArch {
            num_blocks: sr.generator.rrdb,
            channels: sr.basic_setting.channels,
            growth_channels: sr.basic_setting.growth_channels,
            ratio: sr.generator.upscaling_ratio,
            zero_init_last: true,
        }
    }

    pub fn sr_train_config(&self) -> SrTrainConfig {
        let sr = &self.super_resolution;
        let mut degradation = sr.degradation.clone();
        degradation.gt_patch = sr.basic_setting.gt_size;
        SrTrainConfig {
            warmup_steps: sr.basic_setting.warmup_iteration,
            adversarial_steps: sr.basic_setting.total_iteration,
            finetune_steps: sr.basic_setting.finetune_iteration,
            batch_size: sr.basic_setting.batch_size,
            learning_rate: sr.optimizer.learning_rate,
            betas: sr.optimizer.betas,
            schedule_fractions: sr.optimizer.scheduling_intervals.clone(),
            schedule_ratio: sr.optimizer.scheduling_ratio,
            perceptual_weight: sr.optimizer.weight_of_perceptual_loss,
            recon_weight: sr.optimizer.weight_of_reconstruction_loss,
            adv_weight: sr.optimizer.weight_of_adversarial_loss,
            gradient_clip: sr.optimizer.gradient_clip,
            noise_sigma: sr.generator.standard_deviation_of_random_noise,
            degradation,
            disc_channels: sr.basic_setting.discriminator_channels,
            ..SrTrainConfig::default()
        }
    }

    /// Base resolution for an image of the given size.
    pub fn base_resolution(&self, size: (usize, usize)) -> (usize, usize) {
        let gt = self.first_step.basic_setting.gt_size;
        if gt == 0 || gt == size.1 {
            return size;
        }
        let h = (size.0 as f64 * gt as f64 / size.1 as f64).round().max(1.0) as usize;
        (h, gt)
    }

    /// Training image at the configured base resolution.
    pub fn prepare_image(&self, image: &ImageTensor) -> Result<ImageTensor> {
        let (h, w) = self.base_resolution(image.size());
        if (h, w) == image.size() {
            return Ok(image.clone());
        }
        ImageTensor::new(resize_bicubic(image.tensor(), h, w).clamp(-1.0, 1.0))
    }

    pub fn schedule(&self, base: (usize, usize)) -> Result<PyramidSchedule> {
        let g = &self.first_step.generator;
        build_schedule(base, g.scale_factor, g.patch_vae, g.patch_gan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_tables() {
        let c = RunConfig::default();
        let g = c.global_config();
        assert_eq!(g.iterations_per_scale, 5000);
        assert_eq!((g.intermediate_layers, g.channels, g.batch_size), (5, 64, 2));
        assert_eq!(g.learning_rate, 5e-4);
        assert_eq!((g.recon_weight, g.kl_weight, g.adv_weight), (10.0, 1.0, 1.0));
        let t = c.sr_train_config();
        assert_eq!((t.batch_size, t.learning_rate), (16, 1e-4));
        assert_eq!((t.perceptual_weight, t.recon_weight, t.adv_weight), (1.0, 0.01, 0.005));
        assert_eq!(t.degradation.gt_patch, 128);
        assert_eq!(c.sr_arch().num_blocks, 23);
        assert_eq!(c.schedule((135, 256)).unwrap().resolutions.len(), 10);
    }

    #[test]
    fn toml_round_trip() {
        for c in [RunConfig::default(), RunConfig::desk()] {
            let s = c.to_toml_string();
            assert_eq!(RunConfig::from_toml_str(&s).unwrap(), c);
        }
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = RunConfig::from_toml_str("seed = 7\n[first_step.basic_setting]\nchannels = 16\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.first_step.basic_setting.channels, 16);
        assert_eq!(c.first_step.basic_setting.intermediate_layers, 5);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::from_toml_str("[first_step.generator]\nscale_factor = 1.5\n").is_err());
        assert!(RunConfig::from_toml_str("unknown_key = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[super_resolution.generator]\nupscaling_ratio = 1\n").is_err());
    }

    #[test]
    fn base_resolution_keeps_aspect() {
        let c = RunConfig::default();
        assert_eq!(c.base_resolution((2160, 4096)), (135, 256));
        assert_eq!(c.base_resolution((135, 256)), (135, 256));
    }
}
