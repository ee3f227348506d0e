use clap::{Args, Parser, Subcommand, ValueEnum};
use ourgan_core::erf_probe::{choose_overlap, measure_erf, min_probe_input, ConvStack};
use ourgan_core::harness::config::RunConfig;
use ourgan_core::harness::eval::evaluate;
use ourgan_core::harness::image_io::{heatmap, load_dataset, load_image, save_image, save_image_16};
use ourgan_core::memory_planner::{default_factor, plan, TilePlan};
use ourgan_core::orchestrator::{
    extractor, plan_spec, run_pipeline_observed, seam_check, train_all, LoadedRun, StageKind, StagePlan, StageRecord,
    TrainOptions,
};
use ourgan_core::srnet::{SrArch, SrNetwork};
use ourgan_core::{Error, Result};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const RUN_DIR_ENV: &str = "OURGAN_RUN_DIR";

#[derive(Parser, Debug)]
#[command(name = "ourgan", version, about = "One-shot high-resolution image synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every stage from one image and write a run manifest.
    Train(TrainArgs),
    /// Sample images from a trained run.
    Synth(SynthArgs),
    /// Measure the effective receptive field of an SR model.
    Erf(ErfArgs),
    /// Plan tile sizes under a memory budget.
    Plan(PlanArgs),
    /// SIFID and diversity of a sample directory against a training image.
    Eval(EvalArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    image: PathBuf,
    /// TOML configuration; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    /// Run name under the run root.
    #[arg(long, default_value = "default")]
    name: String,
    /// Explicit run directory; overrides the run root and name.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Manifest file or run directory.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    tile_h: Option<usize>,
    #[arg(long)]
    tile_w: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    /// Re-plan tiled stages with the memory planner.
    #[arg(long)]
    auto_plan: bool,
    #[arg(long)]
    budget_bytes: Option<u64>,
    /// Write a tiled-vs-whole difference heatmap per tiled stage.
    #[arg(long)]
    emit_seam_map: bool,
    #[arg(long)]
    sixteen_bit: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Toy {
    /// Single 1x1 convolution.
    Pointwise,
    /// Single 3x3 convolution.
    Conv3x3,
    /// Stack of --depth 3x3 convolutions.
    Stack,
}

#[derive(Args, Debug)]
struct ErfArgs {
    /// Measure the run's first SR model.
    #[arg(long, conflicts_with = "toy")]
    manifest: Option<PathBuf>,
    /// Measure a randomly initialised toy network instead.
    #[arg(long)]
    toy: Option<Toy>,
    #[arg(long, default_value_t = 12)]
    depth: usize,
    /// Square input size; defaults to the smallest valid one.
    #[arg(long)]
    input: Option<usize>,
    #[arg(long, default_value_t = 16)]
    probes: usize,
    #[arg(long, default_value_t = 0.98)]
    energy: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    ratio: usize,
    #[arg(long, default_value_t = 0)]
    overlap: usize,
    /// Omit for an unbounded budget.
    #[arg(long)]
    budget_bytes: Option<u64>,
    /// Bytes per output pixel; defaults to the desk SR model's widest layer.
    #[arg(long)]
    factor: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    samples: PathBuf,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn write(path: &Path, s: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn pretty(v: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => match a.preset {
            Preset::Desk => RunConfig::desk(),
            Preset::Paper => RunConfig::default(),
        },
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let dir = a.run_dir.unwrap_or_else(|| run_root().join(&a.name));
    let opts = TrainOptions {
        resume: a.resume,
        stop_after: None,
    };
    let m = train_all(&a.image, &cfg, &dir, &opts)?;
    println!(
        "{}",
        pretty(&json!({
            "manifest": dir.join("manifest.json"),
            "run_id": m.run_id,
            "overlap": m.overlap,
            "final_resolution": m.stage_plan.as_ref().map(|p| p.final_resolution()),
        }))?
    );
    Ok(())
}

fn run_dir_of(manifest: Option<PathBuf>) -> PathBuf {
    match manifest {
        Some(p) if p.is_file() => p.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
        Some(p) => p,
        None => run_root().join("default"),
    }
}

fn override_plan(a: &SynthArgs, run: &LoadedRun) -> Result<StagePlan> {
    let mut p = run.plan();
    let cfg = &run.manifest.config;
    let overlap = a.overlap.or(run.manifest.overlap).unwrap_or(0);
    if a.auto_plan {
        let budget = a.budget_bytes.unwrap_or(cfg.pipeline.budget_bytes);
        let widest = run.sr.first().map_or(1, |m| m.widest_channels());
        let mut c = cfg.clone();
        c.pipeline.budget_bytes = budget;
        return StagePlan::build(&plan_spec(&c, run.cascade.schedule.base_resolution, overlap, widest));
    }
    if a.tile_h.is_none() && a.tile_w.is_none() && a.overlap.is_none() && a.budget_bytes.is_none() {
        return Ok(p);
    }
    for s in p.stages.iter_mut().filter(|s| s.kind == StageKind::TiledSr) {
        let old = s.tile_plan.clone().expect("tiled stage has a plan");
        let core = (a.tile_h.unwrap_or(old.tile_core.0), a.tile_w.unwrap_or(old.tile_core.1));
        let budget = a.budget_bytes.unwrap_or(u64::MAX);
        s.tile_plan = Some(TilePlan::manual(
            s.input_resolution,
            core,
            overlap,
            s.ratio,
            old.bytes_per_pixel_factor,
            budget,
        )?);
    }
    p.validate()?;
    Ok(p)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::invalid("harness", "--count must be at least 1"));
    }
    let dir = run_dir_of(a.manifest.clone());
    let run = LoadedRun::load(&dir)?;
    let plan = override_plan(&a, &run)?;
    let out = a.out.clone().unwrap_or_else(|| dir.join("samples"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let models = run.models();
    let mut samples = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let seed = a.seed.wrapping_add(i as u64);
        let mut seams = Vec::new();
        let mut observe = |stage: &ourgan_core::orchestrator::Stage,
                           input: Option<&ourgan_core::ImageTensor>,
                           output: &ourgan_core::ImageTensor,
                           s: u64|
         -> Result<()> {
            if a.emit_seam_map && stage.kind == StageKind::TiledSr {
                let model: &dyn SrNetwork = models.sr[stage.model];
                let rep = seam_check(stage, input.expect("sr input"), output, model, s)?;
                let name = format!("seam_{i:03}_{}.png", seams.len());
                let m: Vec<f64> = rep.map.iter().map(|&v| v as f64).collect();
                save_image(&out.join(&name), &heatmap(&m, rep.height, rep.width))?;
                seams.push(json!({"file": name, "report": rep}));
            }
            Ok(())
        };
        let (img, records): (_, Vec<StageRecord>) = run_pipeline_observed(&plan, &models, seed, &mut observe)?;
        let name = format!("sample_{i:03}.png");
        if a.sixteen_bit {
            save_image_16(&out.join(&name), &img)?;
        } else {
            save_image(&out.join(&name), &img)?;
        }
        samples.push(json!({"file": name, "seed": seed, "stages": records, "seam_maps": seams}));
    }
    let report = json!({"run_id": run.manifest.run_id, "plan": plan, "samples": samples});
    write(&out.join("synth_report.json"), &pretty(&report)?)?;
    println!("{}", pretty(&json!({"out": out, "count": a.count, "final_resolution": plan.final_resolution()}))?);
    Ok(())
}

fn cmd_erf(a: ErfArgs) -> Result<()> {
    let loaded;
    let toy;
    let model: &dyn SrNetwork = match (&a.manifest, a.toy) {
        (_, Some(t)) => {
            toy = match t {
                Toy::Pointwise => ConvStack::random(1, 3, 1, a.seed),
                Toy::Conv3x3 => ConvStack::random(1, 3, 3, a.seed),
                Toy::Stack => ConvStack::random(a.depth, 16, 3, a.seed),
            };
            &toy
        }
        (m, None) => {
            loaded = LoadedRun::load(&run_dir_of(m.clone()))?;
            loaded
                .sr
                .first()
                .ok_or_else(|| Error::invalid("harness", "run has no SR model"))?
        }
    };
    let n = a.input.unwrap_or_else(|| min_probe_input(model.trf_radius()).max(3));
    let r = model.ratio();
    let c = n / 2;
    let prof = measure_erf(model, (n, n), (c * r, c * r), a.probes, a.energy, a.seed)?;
    let out = a.out.unwrap_or_else(|| run_root().join("erf"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    save_image(&out.join("erf_heatmap.png"), &heatmap(&prof.grad_map, prof.height, prof.width))?;
    write(&out.join("erf_coverage.csv"), &prof.coverage_csv())?;
    let report = json!({
        "radius_px": prof.radius_px,
        "trf_radius_px": prof.trf_radius_px,
        "overlap": choose_overlap(&prof),
        "energy_fraction": prof.energy_fraction,
        "input_size": n,
        "probes": prof.num_probes,
        "center": prof.center,
    });
    write(&out.join("erf_report.json"), &pretty(&report)?)?;
    println!("{}", pretty(&report)?);
    Ok(())
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let factor = a.factor.unwrap_or_else(|| {
        let d = SrArch::desk();
        default_factor(d.channels + 4 * d.growth_channels, 4)
    });
    let p = plan(a.height, a.width, a.ratio, a.overlap, a.budget_bytes.unwrap_or(u64::MAX), factor)?;
    println!("{}", pretty(&p)?);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let train = load_image(&a.train)?;
    let samples: Vec<_> = load_dataset(&a.samples)?.into_iter().map(|(_, i)| i).collect();
    let rep = evaluate(&train, &samples, &extractor(&RunConfig::default()))?;
    let s = pretty(&rep)?;
    if let Some(p) = &a.out {
        write(p, &s)?;
    }
    if let Some(p) = &a.csv {
        write(p, &rep.to_csv())?;
    }
    println!("{s}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Erf(a) => cmd_erf(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
