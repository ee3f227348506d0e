//! Global structure, then in-memory and tiled super-resolution stages.

use crate::erf_probe::{measure_erf, min_probe_input, ErfProfile};
use crate::error::{Error, Result};
use crate::global_generator::{train_first_step, CascadeState};
use crate::harness::checkpoint::{load_cascade, load_sr, save_cascade, save_sr};
use crate::harness::config::RunConfig;
use crate::harness::image_io::{heatmap, load_image, save_image};
use crate::harness::manifest::{sha256_hex, RunManifest, TrainingImage};
use crate::image_tensor::ImageTensor;
use crate::memory_planner::{default_factor, estimate, plan, TilePlan};
use crate::metrics::RandomFeatureNet;
use crate::srnet::{add_noise, finetune, pretrain_adversarial, pretrain_warmup, SrModel, SrNetwork, SrTrainReport};
use crate::tiler::{default_band, seam_diff, tiled_sr, SeamReport};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Global,
    InMemorySr,
    TiledSr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub kind: StageKind,
    /// Index into the SR model list; unused by the global stage.
    pub model: usize,
    pub noise_sigma: f32,
    pub ratio: usize,
    pub input_resolution: (usize, usize),
    pub output_resolution: (usize, usize),
    pub tile_plan: Option<TilePlan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
    /// Bytes per SR output pixel used for planning.
    pub bytes_per_pixel_factor: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSpec {
    pub base_resolution: (usize, usize),
    pub ratio: usize,
    pub in_memory_stages: usize,
    pub tiled_stages: usize,
    pub overlap: usize,
    pub budget_bytes: u64,
    pub bytes_per_pixel_factor: u64,
    pub noise_sigma: f32,
    pub share_sr_weights: bool,
}

impl StagePlan {
    pub fn global_only(base: (usize, usize)) -> Self {
        Self {
            stages: vec![Stage {
                kind: StageKind::Global,
                model: 0,
                noise_sigma: 0.0,
                ratio: 1,
                input_resolution: base,
                output_resolution: base,
                tile_plan: None,
            }],
            bytes_per_pixel_factor: 0,
        }
    }

    pub fn build(spec: &PlanSpec) -> Result<Self> {
        let mut p = Self::global_only(spec.base_resolution);
        p.bytes_per_pixel_factor = spec.bytes_per_pixel_factor;
        let mut res = spec.base_resolution;
        let n = spec.in_memory_stages + spec.tiled_stages;
        for i in 0..n {
            let tiled = i >= spec.in_memory_stages;
            let out = (res.0 * spec.ratio, res.1 * spec.ratio);
            let tile_plan = if tiled {
                Some(plan(
                    res.0,
                    res.1,
                    spec.ratio,
                    spec.overlap,
                    spec.budget_bytes,
                    spec.bytes_per_pixel_factor,
                )?)
            } else {
                None
            };
            p.stages.push(Stage {
                kind: if tiled { StageKind::TiledSr } else { StageKind::InMemorySr },
                model: if spec.share_sr_weights { 0 } else { i },
                noise_sigma: spec.noise_sigma,
                ratio: spec.ratio,
                input_resolution: res,
                output_resolution: out,
                tile_plan,
            });
            res = out;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn final_resolution(&self) -> (usize, usize) {
        self.stages.last().map_or((0, 0), |s| s.output_resolution)
    }

    pub fn num_sr_models(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| s.kind != StageKind::Global)
            .map(|s| s.model + 1)
            .max()
            .unwrap_or(0)
    }

    /// Bytes the stage is planned to hold for one SR call, given the
    /// per-output-pixel factor.
    pub fn planned_bytes(stage: &Stage, factor: u64) -> Option<u64> {
        match stage.kind {
            StageKind::Global => None,
            StageKind::InMemorySr => {
                let (h, w) = stage.input_resolution;
                Some(estimate(h, w, stage.ratio, 0) * factor)
            }
            StageKind::TiledSr => stage.tile_plan.as_ref().map(|t| t.estimated_bytes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |i: usize, m: String| Err(Error::invalid("orchestrator", format!("stage {i}: {m}")));
        let Some(first) = self.stages.first() else {
            return bad(0, "plan has no stages".into());
        };
        if first.kind != StageKind::Global || first.input_resolution != first.output_resolution {
            return bad(0, "the first stage must be the global generator".into());
        }
        for (i, w) in self.stages.windows(2).enumerate() {
            let (prev, s) = (&w[0], &w[1]);
            let i = i + 1;
            if s.kind == StageKind::Global {
                return bad(i, "only the first stage may be global".into());
            }
            if s.input_resolution != prev.output_resolution {
                return bad(i, format!("input {:?} does not match previous output {:?}", s.input_resolution, prev.output_resolution));
            }
            let (h, w) = s.input_resolution;
            if s.output_resolution != (h * s.ratio, w * s.ratio) {
                return bad(i, format!("output {:?} is not {}x the input", s.output_resolution, s.ratio));
            }
            match (&s.kind, &s.tile_plan) {
                (StageKind::TiledSr, None) => return bad(i, "tiled stage without a tile plan".into()),
                (StageKind::TiledSr, Some(t)) if t.full_size != s.input_resolution || t.ratio != s.ratio => {
                    return bad(i, "tile plan does not match the stage geometry".into())
                }
                (StageKind::TiledSr, Some(t)) if t.estimated_bytes > t.budget_bytes => {
                    return bad(i, "tile plan exceeds its budget".into())
                }
                (StageKind::InMemorySr, Some(_)) => return bad(i, "in-memory stage with a tile plan".into()),
                _ => {}
            }
        }
        Ok(())
    }
}

/// Deterministic per-stage seed from a master seed and a counter.
pub fn stage_seed(master: u64, counter: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(counter);
    rng.next_u64()
}

pub struct PipelineModels<'a> {
    pub global: &'a CascadeState,
    pub sr: Vec<&'a dyn SrNetwork>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub index: usize,
    pub kind: StageKind,
    pub seed: u64,
    pub output_resolution: (usize, usize),
    pub tiles: usize,
    pub planned_bytes: Option<u64>,
    pub millis: u64,
}

fn run_stage(stage: &Stage, input: Option<ImageTensor>, models: &PipelineModels, seed: u64) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if stage.kind == StageKind::Global {
        return models.global.sample(seed);
    }
    let input = input.expect("sr stage after global");
    let model = *models
        .sr
        .get(stage.model)
        .ok_or_else(|| Error::invalid("orchestrator", format!("no SR model {}", stage.model)))?;
    if model.ratio() != stage.ratio {
        return Err(Error::invalid(
            "orchestrator",
            format!("model ratio {} differs from stage ratio {}", model.ratio(), stage.ratio),
        ));
    }
    match stage.kind {
        StageKind::InMemorySr => {
            let noised = add_noise(&input, stage.noise_sigma, &mut rng);
            crate::srnet::sr_image(model, &noised)
        }
        _ => {
            let layout = stage.tile_plan.as_ref().expect("validated").layout()?;
            tiled_sr(&input, model, &layout, stage.noise_sigma, &mut rng)
        }
    }
}

/// Runs every stage in order; stage `k` draws its noise from
/// `stage_seed(seed, k)`.
pub fn run_pipeline(plan: &StagePlan, models: &PipelineModels, seed: u64) -> Result<(ImageTensor, Vec<StageRecord>)> {
    run_pipeline_observed(plan, models, seed, &mut |_, _, _, _| Ok(()))
}

/// Called after each stage with (stage, input, output, stage seed).
pub type StageObserver<'o> = dyn FnMut(&Stage, Option<&ImageTensor>, &ImageTensor, u64) -> Result<()> + 'o;

pub fn run_pipeline_observed(
    plan: &StagePlan,
    models: &PipelineModels,
    seed: u64,
    observe: &mut StageObserver,
) -> Result<(ImageTensor, Vec<StageRecord>)> {
    plan.validate()?;
    let mut img: Option<ImageTensor> = None;
    let mut records = Vec::with_capacity(plan.stages.len());
    for (k, stage) in plan.stages.iter().enumerate() {
        let s = stage_seed(seed, k as u64);
        let wrap = |e: Error| Error::Stage {
            index: k,
            name: format!("{:?}", stage.kind),
            source: Box::new(e),
        };
        let t0 = Instant::now();
        let out = run_stage(stage, img.clone(), models, s).map_err(wrap)?;
        if out.size() != stage.output_resolution {
            return Err(wrap(Error::invalid(
                "orchestrator",
                format!("produced {:?}, planned {:?}", out.size(), stage.output_resolution),
            )));
        }
        let millis = t0.elapsed().as_millis() as u64;
        observe(stage, img.as_ref(), &out, s).map_err(wrap)?;
        records.push(StageRecord {
            index: k,
            kind: stage.kind,
            seed: s,
            output_resolution: out.size(),
            tiles: stage.tile_plan.as_ref().map_or(1, |t| t.k),
            planned_bytes: StagePlan::planned_bytes(stage, plan.bytes_per_pixel_factor),
            millis,
        });
        img = Some(out);
    }
    Ok((img.expect("at least one stage"), records))
}

/// Compares a tiled stage's output with whole-image SR of the same noised
/// input.
pub fn seam_check(
    stage: &Stage,
    input: &ImageTensor,
    output: &ImageTensor,
    model: &dyn SrNetwork,
    stage_seed: u64,
) -> Result<SeamReport> {
    let plan = stage
        .tile_plan
        .as_ref()
        .ok_or_else(|| Error::invalid("orchestrator", "seam check needs a tiled stage"))?;
    let layout = plan.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed);
    let noised = add_noise(input, stage.noise_sigma, &mut rng);
    let whole = crate::srnet::sr_image(model, &noised)?;
    seam_diff(output, &whole, &layout, default_band(&layout))
}

pub fn extractor(config: &RunConfig) -> RandomFeatureNet {
    match config.pipeline.extractor_seed {
        0 => RandomFeatureNet::desk(),
        s => RandomFeatureNet::new(s, true),
    }
}

pub const STAGES: [&str; 4] = ["global", "sr", "erf", "plan"];
pub const GLOBAL_CKPT: &str = "global.ckpt";

pub fn sr_ckpt_name(i: usize) -> String {
    format!("sr{i}.ckpt")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOptions {
    pub resume: bool,
    /// Stop (as if interrupted) once this stage is persisted.
    pub stop_after: Option<String>,
}

fn write_json<T: Serialize>(run_dir: &Path, name: &str, v: &T) -> Result<String> {
    let p = run_dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(&p, e))?;
    Ok(name.to_string())
}

fn stage_err(index: usize, name: &str, e: Error) -> Error {
    Error::Stage {
        index,
        name: name.to_string(),
        source: Box::new(e),
    }
}

/// SR model count implied by the configuration.
pub fn sr_model_count(config: &RunConfig) -> usize {
    let n = config.pipeline.in_memory_sr_stages + config.pipeline.tiled_sr_stages;
    if config.pipeline.share_sr_weights {
        n.min(1)
    } else {
        n
    }
}

fn train_sr(config: &RunConfig, image: &ImageTensor, run_dir: &Path, i: usize) -> Result<SrTrainReport> {
    let cfg = config.sr_train_config();
    let seed = stage_seed(config.seed, 1 + i as u64);
    let ext = extractor(config);
    let mut report = SrTrainReport::default();
    let mut model = match &config.super_resolution.pretrained {
        Some(p) => load_sr(Path::new(p))?,
        None => {
            let mut m = SrModel::new(config.sr_arch(), seed)?;
            let data = std::slice::from_ref(image);
            report.warmup = pretrain_warmup(&mut m, data, &cfg, seed ^ 1)?;
            if cfg.adversarial_steps > 0 {
                report.adversarial = pretrain_adversarial(&mut m, data, &cfg, &ext, seed ^ 2)?;
            }
            m
        }
    };
    report.finetune = finetune(&mut model, image, &cfg, &ext, seed ^ 3)?;
    save_sr(&run_dir.join(sr_ckpt_name(i)), &model)?;
    Ok(report)
}

/// Measures the ERF of the first SR model at its smallest valid input.
pub fn measure_run_erf(config: &RunConfig, model: &SrModel) -> Result<ErfProfile> {
    let n = min_probe_input(model.trf_radius());
    let c = n / 2;
    let r = model.ratio();
    measure_erf(
        model,
        (n, n),
        (c * r, c * r),
        config.pipeline.erf_probes,
        config.pipeline.erf_energy,
        stage_seed(config.seed, 100),
    )
}

pub fn plan_spec(config: &RunConfig, base: (usize, usize), overlap: usize, widest_channels: usize) -> PlanSpec {
    PlanSpec {
        base_resolution: base,
        ratio: config.super_resolution.generator.upscaling_ratio,
        in_memory_stages: config.pipeline.in_memory_sr_stages,
        tiled_stages: config.pipeline.tiled_sr_stages,
        overlap,
        budget_bytes: config.pipeline.budget_bytes,
        bytes_per_pixel_factor: default_factor(widest_channels, config.pipeline.element_size),
        noise_sigma: config.super_resolution.generator.standard_deviation_of_random_noise,
        share_sr_weights: config.pipeline.share_sr_weights,
    }
}

/// Trains every stage, persisting checkpoints and the manifest after each
/// one. With `resume`, stages already marked done are loaded instead.
pub fn train_all(image_path: &Path, config: &RunConfig, run_dir: &Path, opts: &TrainOptions) -> Result<RunManifest> {
    config.validate()?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let bytes = std::fs::read(image_path).map_err(|e| Error::io(image_path, e))?;
    let original = load_image(image_path)?;
    let base_image = config.prepare_image(&original)?;
    let record = TrainingImage {
        path: image_path.display().to_string(),
        sha256: sha256_hex(&bytes),
        size: original.size(),
        base_resolution: base_image.size(),
    };
    let mut manifest = match RunManifest::load(run_dir) {
        Ok(m) if opts.resume => {
            if m.training_image.sha256 != record.sha256 || m.config != *config {
                return Err(Error::invalid(
                    "orchestrator",
                    "cannot resume: the training image or configuration differs from the manifest",
                ));
            }
            m
        }
        _ => RunManifest::new(record, config.clone(), &STAGES),
    };
    let stop = |m: &RunManifest, name: &str| opts.stop_after.as_deref() == Some(name) && m.is_done(name);

    // 1. global structure
    let cascade = if manifest.is_done("global") {
        load_cascade(&run_dir.join(GLOBAL_CKPT))?
    } else {
        let schedule = config.schedule(base_image.size()).map_err(|e| stage_err(0, "global", e))?;
        let mut st = CascadeState::new(schedule, config.global_config(), stage_seed(config.seed, 0));
        let rep = train_first_step(&base_image, &mut st, stage_seed(config.seed, 0) ^ 0x9e37)
            .map_err(|e| stage_err(0, "global", e))?;
        save_cascade(&run_dir.join(GLOBAL_CKPT), &st)?;
        let rep = write_json(run_dir, "global_report.json", &rep)?;
        manifest.mark_done("global", Some(GLOBAL_CKPT.into()), Some(rep));
        manifest.save(run_dir)?;
        st
    };
    if stop(&manifest, "global") {
        return Ok(manifest);
    }

    // 2. super-resolution models
    let n_sr = sr_model_count(config);
    if !manifest.is_done("sr") {
        let mut reports = Vec::with_capacity(n_sr);
        for i in 0..n_sr {
            reports.push(train_sr(config, &original, run_dir, i).map_err(|e| stage_err(1, "sr", e))?);
        }
        let rep = write_json(run_dir, "sr_report.json", &reports)?;
        manifest.mark_done("sr", Some(sr_ckpt_name(0)), Some(rep));
        manifest.save(run_dir)?;
    }
    if stop(&manifest, "sr") {
        return Ok(manifest);
    }
    let sr0 = if n_sr > 0 { Some(load_sr(&run_dir.join(sr_ckpt_name(0)))?) } else { None };

    // 3. effective receptive field
    if !manifest.is_done("erf") {
        if let Some(m) = &sr0 {
            let prof = measure_run_erf(config, m).map_err(|e| stage_err(2, "erf", e))?;
            save_image(&run_dir.join("erf_heatmap.png"), &heatmap(&prof.grad_map, prof.height, prof.width))?;
            let csv = run_dir.join("erf_coverage.csv");
            std::fs::write(&csv, prof.coverage_csv()).map_err(|e| Error::io(&csv, e))?;
            manifest.overlap = Some(crate::erf_probe::choose_overlap(&prof));
            manifest.erf = Some(prof);
            manifest.mark_done("erf", None, Some("erf_coverage.csv".into()));
        } else {
            manifest.mark_done("erf", None, None);
        }
        manifest.save(run_dir)?;
    }
    if stop(&manifest, "erf") {
        return Ok(manifest);
    }

    // 4. default tile plans
    if !manifest.is_done("plan") {
        let base = cascade.schedule.base_resolution;
        let plan = match &sr0 {
            Some(m) => {
                let spec = plan_spec(config, base, manifest.overlap.unwrap_or(0), m.widest_channels());
                StagePlan::build(&spec).map_err(|e| stage_err(3, "plan", e))?
            }
            None => StagePlan::global_only(base),
        };
        manifest.stage_plan = Some(plan);
        manifest.mark_done("plan", None, None);
        manifest.save(run_dir)?;
    }
    Ok(manifest)
}

/// Trained networks referenced by a manifest.
pub struct LoadedRun {
    pub manifest: RunManifest,
    pub cascade: CascadeState,
    pub sr: Vec<SrModel>,
}

impl LoadedRun {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let manifest = RunManifest::load(run_dir)?;
        if !STAGES.iter().all(|s| manifest.is_done(s)) {
            return Err(Error::invalid("orchestrator", "run is incomplete; resume training first"));
        }
        let cascade = load_cascade(&run_dir.join(GLOBAL_CKPT))?;
        let sr = (0..sr_model_count(&manifest.config))
            .map(|i| load_sr(&run_dir.join(sr_ckpt_name(i))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, cascade, sr })
    }

    pub fn models(&self) -> PipelineModels<'_> {
        PipelineModels {
            global: &self.cascade,
            sr: self.sr.iter().map(|m| m as &dyn SrNetwork).collect(),
        }
    }

    pub fn plan(&self) -> StagePlan {
        self.manifest
            .stage_plan
            .clone()
            .unwrap_or_else(|| StagePlan::global_only(self.cascade.schedule.base_resolution))
    }
}
