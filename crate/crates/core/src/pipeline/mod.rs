//! Stage orchestration: preprocess, coarse field, back view, fine geometry,
//! texture, and the run directory they share.
//!
//! Every stage reads its inputs from the run directory and writes its outputs
//! plus a `manifest.json` next to them, so any stage can be rerun alone.

pub mod backview;
pub mod checkpoint;
pub mod coarse;
pub mod config;
pub mod geometry;
pub mod normals;
pub mod preprocess;
pub mod texture;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{DenoiserBackend, LocalModelBackend, MockBackend, NoiseSchedule, RemoteBackend, RemoteConfig};
use crate::optim::Adam;
use crate::scene::{Camera, ViewSampler};
use crate::util::{atomic_write, sha256_hex};

pub use checkpoint::StageCheckpoint;
pub use config::{BackendChoice, RunConfig};

pub const PREPROCESS_DIR: &str = "preprocess";
pub const COARSE_DIR: &str = "coarse";
pub const BACKVIEW_DIR: &str = "backview";
pub const GEOMETRY_DIR: &str = "fine_geo";
pub const TEXTURE_DIR: &str = "texture";
pub const EVAL_DIR: &str = "eval";

/// Runtime switches that do not change results and so stay out of the config hash.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Continue from the stage's saved state if one exists.
    pub resume: bool,
    /// Stop (after saving state) once this many steps of the stage are done.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Complete,
    Stopped { step: usize },
}

/// Config plus the guidance backend built from it.
pub struct Run {
    pub cfg: RunConfig,
    pub schedule: NoiseSchedule,
    pub backend: Box<dyn DenoiserBackend>,
    pub opts: RunOptions,
}

impl Run {
    pub fn new(cfg: RunConfig, opts: RunOptions) -> Result<Self> {
        cfg.validate()?;
        let schedule = NoiseSchedule::default();
        let backend = build_backend(&cfg, &schedule)?;
        Ok(Self {
            cfg,
            schedule,
            backend,
            opts,
        })
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.cfg.stage_dir(stage)
    }

    pub fn hash(&self) -> String {
        self.cfg.hash()
    }

    /// The input image's viewpoint at `res`.
    pub fn reference_camera(&self, res: usize) -> Result<Camera> {
        let c = &self.cfg.camera;
        Camera::orbit(
            c.reference_elevation_deg,
            c.reference_azimuth_deg,
            c.distance,
            c.fov_deg,
            res,
            res,
        )
    }

    pub fn sampler(&self, elevation: (f64, f64), res: usize, stream: u64) -> ViewSampler {
        ViewSampler {
            elevation_range_deg: elevation,
            azimuth_range_deg: self.cfg.camera.azimuth_deg,
            distance: self.cfg.camera.distance,
            fov_deg: self.cfg.camera.fov_deg,
            resolution: (res, res),
            seed: crate::util::derive_seed(self.cfg.seed, &[stream]),
        }
    }

    /// Loads saved optimizer state when resuming, checking it belongs to this config.
    pub(crate) fn resume_state(&self, stage: &str, path: &Path) -> Result<Option<StageCheckpoint>> {
        if !self.opts.resume || !path.exists() {
            return Ok(None);
        }
        let ck = StageCheckpoint::load(path)?;
        ck.check(stage, &self.hash())?;
        log::info!("{stage}: resuming at step {}", ck.step);
        Ok(Some(ck))
    }

    pub(crate) fn save_state(&self, stage: &str, path: &Path, step: usize, params: &[f64], opt: &Adam) -> Result<()> {
        StageCheckpoint {
            stage: stage.to_string(),
            step,
            config_hash: self.hash(),
            params: params.to_vec(),
            optimizer: opt.clone(),
        }
        .save(path)
    }

    /// Whether the loop should save state after finishing `done` steps.
    pub(crate) fn should_save(&self, done: usize, every: usize, total: usize) -> bool {
        done == total || (every > 0 && done % every == 0) || self.opts.stop_after == Some(done)
    }
}

pub fn build_backend(cfg: &RunConfig, schedule: &NoiseSchedule) -> Result<Box<dyn DenoiserBackend>> {
    Ok(match cfg.backend.kind {
        BackendChoice::Mock => Box::new(MockBackend::new(cfg.backend.mock.clone(), schedule.clone())?),
        BackendChoice::Local => Box::new(LocalModelBackend::new(
            cfg.seed,
            cfg.backend.local_image_size,
            schedule.num_steps(),
        )?),
        BackendChoice::Remote => Box::new(RemoteBackend::new(RemoteConfig {
            endpoint: cfg.backend.endpoint.clone(),
            timeout_secs: cfg.backend.timeout_secs as f64,
            ..RemoteConfig::default()
        })),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<PathBuf>,
    pub config_hash: String,
    pub code_version: String,
    pub wall_time_secs: f64,
    pub status: String,
}

/// `git describe` of the source tree, or the package version outside a checkout.
pub fn code_version() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

pub(crate) fn write_manifest(
    run: &Run,
    stage: &str,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    started: Instant,
    status: StageStatus,
) -> Result<()> {
    let inputs = inputs
        .iter()
        .map(|p| {
            Ok(InputRecord {
                sha256: sha256_hex(&std::fs::read(p)?),
                path: p.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        stage: stage.to_string(),
        inputs,
        outputs: outputs.to_vec(),
        config_hash: run.hash(),
        code_version: code_version(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        status: match status {
            StageStatus::Complete => "complete".into(),
            StageStatus::Stopped { step } => format!("stopped at step {step}"),
        },
    };
    atomic_write(&run.dir(stage).join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)
}

pub(crate) fn require_file(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "missing {}; run the `{produced_by}` stage first",
            path.display()
        )))
    }
}

/// Fails with `Diverged` if any value is non-finite.
pub(crate) fn check_finite(values: &[f64], step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { step })
    }
}

/// Runs every enabled stage in order.
pub fn full_run(run: &Run) -> Result<StageStatus> {
    preprocess::run_preprocess(run)?;
    let t = &run.cfg.stages;
    let steps: [(bool, fn(&Run) -> Result<StageStatus>); 4] = [
        (t.coarse, coarse::run_coarse),
        (t.backview, backview::run_backview),
        (t.geometry, geometry::run_fine_geometry),
        (t.texture, texture::run_texture),
    ];
    for (enabled, stage) in steps {
        if enabled {
            if let s @ StageStatus::Stopped { .. } = stage(run)? {
                return Ok(s);
            }
        }
    }
    Ok(StageStatus::Complete)
}
