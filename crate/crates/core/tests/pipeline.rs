//! Stage-level integration: resume, checkpoint compatibility, back-view
//! determinism and the evaluation report, driven through the library and
//! the binary.

use std::path::{Path, PathBuf};
use std::process::Command;

use texhuman::cli::EXIT_USAGE;
use texhuman::field::load_field;
use texhuman::pipeline::{self, coarse, Run, RunConfig, RunOptions, StageStatus};
use texhuman::scene::Image;
use texhuman::synthetic::two_tone_figure;

fn tiny_config(dir: &Path) -> RunConfig {
    let input = dir.join("subject.png");
    if !input.exists() {
        two_tone_figure(96, [0.8, 0.3, 0.2], [0.2, 0.3, 0.7]).save_png(&input).unwrap();
    }
    let mut cfg = RunConfig::desk();
    cfg.input_image = input;
    cfg.workdir = dir.join("run");
    cfg.set_resolution(32);
    cfg.preprocess.resolution = 64;
    cfg.coarse.steps = 6;
    cfg.coarse.samples_per_ray = 32;
    cfg.coarse.checkpoint_every = 2;
    cfg.backview.ddim_steps = 5;
    cfg
}

fn run_with(cfg: &RunConfig, opts: RunOptions) -> Run {
    Run::new(cfg.clone(), opts).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_texhuman"))
}

#[test]
fn interrupted_coarse_run_resumes_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let straight = tiny_config(tmp.path());
    let run = run_with(&straight, RunOptions::default());
    pipeline::preprocess::run_preprocess(&run).unwrap();
    assert_eq!(coarse::run_coarse(&run).unwrap(), StageStatus::Complete);
    let reference = load_field(&coarse::field_path(&run)).unwrap();

    let mut split = straight.clone();
    split.workdir = tmp.path().join("split");
    let first = run_with(
        &split,
        RunOptions {
            stop_after: Some(3),
            ..RunOptions::default()
        },
    );
    pipeline::preprocess::run_preprocess(&first).unwrap();
    assert_eq!(coarse::run_coarse(&first).unwrap(), StageStatus::Stopped { step: 3 });
    assert!(!coarse::field_path(&first).exists());
    let second = run_with(
        &split,
        RunOptions {
            resume: true,
            ..RunOptions::default()
        },
    );
    assert_eq!(coarse::run_coarse(&second).unwrap(), StageStatus::Complete);
    let resumed = load_field(&coarse::field_path(&second)).unwrap();
    assert_eq!(resumed.params, reference.params);

    let rows = |dir: &Path| std::fs::read_to_string(dir.join("coarse/loss.csv")).unwrap();
    assert_eq!(rows(&straight.workdir), rows(&split.workdir));
}

fn stage_cmd(stage: &str, input: &Path, work: &Path) -> Command {
    let mut c = bin();
    c.args(["--quiet", stage, "--res", "64", "--coarse-steps", "3"])
        .arg("--input")
        .arg(input)
        .arg("--workdir")
        .arg(work);
    c
}

#[test]
fn resuming_under_a_different_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("subject.png");
    two_tone_figure(64, [0.8, 0.3, 0.2], [0.2, 0.3, 0.7]).save_png(&input).unwrap();
    let work = tmp.path().join("run");
    assert!(stage_cmd("preprocess", &input, &work).status().unwrap().success());
    let stopped = stage_cmd("coarse", &input, &work).args(["--stop-after", "2"]).status().unwrap();
    assert!(stopped.success());
    let mismatch = stage_cmd("coarse", &input, &work).args(["--resume", "--seed", "7"]).output().unwrap();
    assert_eq!(mismatch.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("config"));
    let resumed = stage_cmd("coarse", &input, &work).arg("--resume").status().unwrap();
    assert!(resumed.success());
}

fn back_view_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    ["back_rgb.png", "back_alpha.png", "back_depth.ctxd"]
        .iter()
        .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
        .collect()
}

#[test]
fn back_view_is_deterministic_and_documented() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let mut cfg = tiny_config(tmp.path());
        cfg.coarse.steps = 2;
        cfg.workdir = tmp.path().join(name);
        let run = run_with(&cfg, RunOptions::default());
        pipeline::preprocess::run_preprocess(&run).unwrap();
        coarse::run_coarse(&run).unwrap();
        pipeline::backview::run_backview(&run).unwrap();
        outputs.push(run.dir(pipeline::BACKVIEW_DIR));
    }
    assert_eq!(back_view_files(&outputs[0]), back_view_files(&outputs[1]));
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(outputs[0].join("backview.json")).unwrap()).unwrap();
    assert!(sidecar["back_prompt"].as_str().unwrap().ends_with("back view"));
    assert_eq!(sidecar["front_prompt"], "a photo of a person");
    assert_eq!(sidecar["steps"], 5);
    assert!(!sidecar["backend"].as_str().unwrap().is_empty());
}

fn write_views(dir: &Path, count: usize, shade: f64) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        let v = (shade + 0.03 * i as f64).min(1.0);
        Image::from_fn(24, 24, 3, |r, c, k| if (r + c + k) % 3 == 0 { v } else { 0.5 })
            .save_png(&dir.join(format!("view_{i:02}.png")))
            .unwrap();
    }
    dir.to_path_buf()
}

#[test]
fn evaluate_writes_a_json_report() {
    let tmp = tempfile::tempdir().unwrap();
    let pred = write_views(&tmp.path().join("pred"), 4, 0.2);
    let gt = write_views(&tmp.path().join("gt"), 4, 0.2);
    let out = tmp.path().join("report");
    let status = bin()
        .args(["--quiet", "evaluate", "--views", "4"])
        .arg("--pred")
        .arg(&pred)
        .arg("--gt")
        .arg(&gt)
        .arg("--out")
        .arg(&out)
        .args(["--metric-backend", "stub"])
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["protocol"], "thuman");
    assert_eq!(report["subjects"][0]["view_count"], 4);
    assert_eq!(report["aggregate"]["psnr"], 99.0);
    assert!((report["aggregate"]["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(out.join("metrics.csv").exists());

    // the single-image protocol needs a learned-metric backend
    let status = bin()
        .args(["--quiet", "evaluate", "--protocol", "sshq"])
        .arg("--pred")
        .arg(&pred)
        .arg("--reference")
        .arg(pred.join("view_00.png"))
        .status()
        .unwrap();
    assert!(!status.success());
}
