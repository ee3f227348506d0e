use ourgan_core::harness::config::RunConfig;
use ourgan_core::harness::image_io::save_image;
use ourgan_core::memory_planner::estimate;
use ourgan_core::synthetic::landscape;
use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn ourgan(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ourgan"))
        .args(args)
        .env("OURGAN_RUN_DIR", root)
        .output()
        .expect("binary runs")
}

fn json_out(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("json on stdout")
}

fn smoke_config(dir: &Path) -> String {
    let mut c = RunConfig::desk();
    let fs = &mut c.first_step;
    fs.basic_setting.iteration_per_scale = 10;
    fs.basic_setting.channels = 8;
    fs.basic_setting.intermediate_layers = 1;
    fs.basic_setting.batch_size = 1;
    fs.basic_setting.gt_size = 0;
    fs.generator.patch_vae = 0;
    fs.generator.patch_gan = 1;
    let sr = &mut c.super_resolution;
    sr.generator.rrdb = 1;
    sr.generator.upscaling_ratio = 2;
    sr.basic_setting.channels = 8;
    sr.basic_setting.growth_channels = 4;
    sr.basic_setting.gt_size = 16;
    sr.basic_setting.batch_size = 2;
    sr.basic_setting.warmup_iteration = 2;
    sr.basic_setting.finetune_iteration = 2;
    sr.basic_setting.discriminator_channels = 8;
    c.pipeline.erf_probes = 2;
    c.pipeline.budget_bytes = 1 << 20;
    let p = dir.join("smoke.toml");
    std::fs::write(&p, c.to_toml_string()).unwrap();
    p.display().to_string()
}

#[test]
fn usage_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(ourgan(d.path(), &[]).status.code(), Some(1));
    assert_eq!(ourgan(d.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(ourgan(d.path(), &["plan", "--height", "x"]).status.code(), Some(1));
    assert_eq!(ourgan(d.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn plan_unbounded_is_single_tile() {
    let d = tempfile::tempdir().unwrap();
    let v = json_out(&ourgan(d.path(), &["plan", "--height", "270", "--width", "512", "--overlap", "24"]));
    assert_eq!(v["k"], 1);
    assert_eq!(v["tile_core"], serde_json::json!([270, 512]));
}

#[test]
fn plan_budget_is_honoured_or_fails() {
    let d = tempfile::tempdir().unwrap();
    let v = json_out(&ourgan(
        d.path(),
        &["plan", "--height", "256", "--width", "256", "--overlap", "8", "--budget-bytes", "400000", "--factor", "1"],
    ));
    assert!(v["estimated_bytes"].as_u64().unwrap() <= 400_000);
    let o = ourgan(d.path(), &["plan", "--height", "64", "--width", "64", "--overlap", "8", "--budget-bytes", "10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("memory_planner"));
}

#[test]
fn erf_on_pointwise_toy_is_zero() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("erf");
    let v = json_out(&ourgan(
        d.path(),
        &["erf", "--toy", "pointwise", "--input", "9", "--probes", "2", "--out", out.to_str().unwrap()],
    ));
    assert_eq!(v["radius_px"], 0);
    assert_eq!(v["overlap"], 0);
    assert!(out.join("erf_heatmap.png").is_file());
    let csv = std::fs::read_to_string(out.join("erf_coverage.csv")).unwrap();
    assert!(csv.starts_with("radius,coverage\n0,1.0"));
}

#[test]
fn eval_identical_dirs_gives_zero_sifid() {
    let d = tempfile::tempdir().unwrap();
    let img = landscape(32, 32, 1);
    let train = d.path().join("train.png");
    save_image(&train, &img).unwrap();
    let samples = d.path().join("samples");
    std::fs::create_dir(&samples).unwrap();
    save_image(&samples.join("a.png"), &img).unwrap();
    save_image(&samples.join("b.png"), &img).unwrap();
    let csv = d.path().join("r.csv");
    let v = json_out(&ourgan(
        d.path(),
        &["eval", "--train", train.to_str().unwrap(), "--samples", samples.to_str().unwrap(), "--csv", csv.to_str().unwrap()],
    ));
    for tap in ["shallow", "deep"] {
        assert!(v["sifid"][tap]["mean"].as_f64().unwrap().abs() < 1e-9);
    }
    assert_eq!(v["diversity"]["mean"], 0.0);
    assert!(std::fs::read_to_string(csv).unwrap().contains("lpips_diversity"));
}

#[test]
fn missing_image_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let o = ourgan(d.path(), &["train", "--image", "/nonexistent/x.png"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_synth() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path().join("runs");
    let img = d.path().join("train.png");
    save_image(&img, &landscape(32, 40, 2)).unwrap();
    let cfg = smoke_config(d.path());
    let v = json_out(&ourgan(&root, &["train", "--image", img.to_str().unwrap(), "--config", &cfg]));
    assert_eq!(v["final_resolution"], serde_json::json!([128, 160]));
    // run root comes from the environment
    assert!(root.join("default/manifest.json").is_file());
    let o = ourgan(&root, &["train", "--image", img.to_str().unwrap(), "--config", &cfg, "--resume"]);
    assert!(o.status.success());

    let out1 = d.path().join("s1");
    let out2 = d.path().join("s2");
    for out in [&out1, &out2] {
        json_out(&ourgan(&root, &["synth", "--count", "3", "--seed", "7", "--out", out.to_str().unwrap()]));
    }
    for i in 0..3 {
        let name = format!("sample_{i:03}.png");
        let a = std::fs::read(out1.join(&name)).unwrap();
        assert_eq!(a, std::fs::read(out2.join(&name)).unwrap());
    }
    assert!(!out1.join("sample_003.png").exists());

    let budget = 200_000u64;
    let out3 = d.path().join("s3");
    json_out(&ourgan(
        &root,
        &[
            "synth",
            "--auto-plan",
            "--budget-bytes",
            &budget.to_string(),
            "--emit-seam-map",
            "--out",
            out3.to_str().unwrap(),
        ],
    ));
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(out3.join("synth_report.json")).unwrap()).unwrap();
    let mut tiled = 0;
    for s in rep["plan"]["stages"].as_array().unwrap() {
        if s["kind"] == "tiled_sr" {
            tiled += 1;
            let t = &s["tile_plan"];
            let (h, w) = (t["tile_core"][0].as_u64().unwrap(), t["tile_core"][1].as_u64().unwrap());
            let e = estimate(h as usize, w as usize, t["ratio"].as_u64().unwrap() as usize, t["overlap"].as_u64().unwrap() as usize);
            assert!(e * t["bytes_per_pixel_factor"].as_u64().unwrap() <= budget);
        }
    }
    assert_eq!(tiled, 1);
    assert!(out3.join("seam_000_0.png").is_file());

    let o = ourgan(&root, &["synth", "--tile-h", "1000", "--tile-w", "3", "--overlap", "50"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ourgan(&root, &["synth", "--manifest", d.path().join("nope").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
