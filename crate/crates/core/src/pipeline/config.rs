//! Run configuration: a TOML file with every key required except the
//! optional hooks, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backview::InjectionPolicy;
use crate::error::{Error, Result};
use crate::field::{DensityBlob, HashGridConfig};
use crate::guidance::{MockSpec, SdsConfig};
use crate::losses::LossWeights;
use crate::util::sha256_hex;

/// Defaults published with the method, shipped as a file next to the crate.
pub const PAPER_DEFAULTS_TOML: &str = include_str!("../../defaults/paper_defaults.toml");
/// Small, fast profile for laptops and CI.
pub const DESK_TOML: &str = include_str!("../../defaults/desk.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Mock,
    Local,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendChoice,
    /// Base URL of the remote service (remote only).
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub endpoint: String,
    pub timeout_secs: u64,
    /// Side length of the local model's images.
    pub local_image_size: usize,
    pub mock: MockSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageToggles {
    pub coarse: bool,
    pub backview: bool,
    pub geometry: bool,
    pub texture: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub distance: f64,
    pub fov_deg: f64,
    pub reference_elevation_deg: f64,
    pub reference_azimuth_deg: f64,
    pub coarse_elevation_deg: (f64, f64),
    pub fine_elevation_deg: (f64, f64),
    pub azimuth_deg: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub resolution: usize,
    /// Fraction of the image height the subject occupies.
    pub height_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseConfig {
    pub steps: usize,
    pub lr: f64,
    pub resolution: usize,
    pub samples_per_ray: usize,
    pub sds_batch: usize,
    /// Side length of the guidance renders.
    pub sds_resolution: usize,
    pub sds: SdsConfig,
    pub field: HashGridConfig,
    pub blob: DensityBlob,
    /// Half-size of the cube the field lives in.
    pub bound: f64,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackviewConfig {
    pub ddim_steps: usize,
    pub cfg: f64,
    pub injection: InjectionPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub steps: usize,
    pub lr: f64,
    pub tet_resolution: usize,
    pub resolution: usize,
    /// Coarse density at which the surface is initialized.
    pub density_threshold: f64,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureConfig {
    pub steps: usize,
    /// Extra steps with guidance off; their weights come from the texture
    /// stage's late phase.
    pub refine_steps: usize,
    pub lr: f64,
    pub resolution: usize,
    pub sds_batch: usize,
    pub view_sds: SdsConfig,
    pub text_sds: SdsConfig,
    pub field: HashGridConfig,
    pub patch_size: usize,
    pub patches_per_step: usize,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub turntable_views: usize,
    pub eval_views: usize,
    pub turntable_elevation_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input_image: PathBuf,
    pub workdir: PathBuf,
    pub prompt: String,
    pub seed: u64,
    /// Shell command turning `{input}` (RGBA PNG) into `{output}` (normal PNG).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_estimator: Option<String>,
    pub backend: BackendConfig,
    pub stages: StageToggles,
    pub camera: CameraConfig,
    pub preprocess: PreprocessConfig,
    pub coarse: CoarseConfig,
    pub backview: BackviewConfig,
    pub geometry: GeometryConfig,
    pub texture: TextureConfig,
    pub weights: LossWeights,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn paper_defaults() -> Self {
        Self::from_toml_str(PAPER_DEFAULTS_TOML).expect("shipped defaults parse")
    }

    pub fn desk() -> Self {
        Self::from_toml_str(DESK_TOML).expect("shipped desk preset parses")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, res) in [
            ("preprocess.resolution", self.preprocess.resolution),
            ("coarse.resolution", self.coarse.resolution),
            ("coarse.sds_resolution", self.coarse.sds_resolution),
            ("geometry.resolution", self.geometry.resolution),
            ("geometry.tet_resolution", self.geometry.tet_resolution),
            ("texture.resolution", self.texture.resolution),
        ] {
            if res < 4 {
                return bad(format!("{name} must be >= 4"));
            }
        }
        if !(self.preprocess.height_frac > 0.0 && self.preprocess.height_frac <= 1.0) {
            return bad("preprocess.height_frac must be in (0, 1]".into());
        }
        for (name, lr) in [
            ("coarse.lr", self.coarse.lr),
            ("geometry.lr", self.geometry.lr),
            ("texture.lr", self.texture.lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.coarse.samples_per_ray < 2 {
            return bad("coarse.samples_per_ray must be >= 2".into());
        }
        if self.camera.distance <= self.coarse.bound * 3f64.sqrt() {
            return bad("camera.distance must place the camera outside the field bounds".into());
        }
        if !(self.camera.fov_deg > 0.0 && self.camera.fov_deg < 180.0) {
            return bad("camera.fov_deg must be in (0, 180)".into());
        }
        for (name, (lo, hi)) in [
            ("camera.coarse_elevation_deg", self.camera.coarse_elevation_deg),
            ("camera.fine_elevation_deg", self.camera.fine_elevation_deg),
            ("camera.azimuth_deg", self.camera.azimuth_deg),
        ] {
            if !(lo <= hi) {
                return bad(format!("{name} must be an ascending range"));
            }
        }
        if self.texture.patch_size == 0 || self.texture.patch_size > self.texture.resolution {
            return bad("texture.patch_size must be in [1, texture.resolution]".into());
        }
        if let Some(late) = &self.weights.texture.late {
            if late.from_step != self.texture.steps {
                return bad(format!(
                    "weights.texture.late.from_step ({}) must equal texture.steps ({})",
                    late.from_step, self.texture.steps
                ));
            }
        }
        if self.backend.kind == BackendChoice::Remote && self.backend.endpoint.is_empty() {
            return bad("backend.endpoint is required for the remote backend".into());
        }
        if self.backview.ddim_steps == 0 {
            return bad("backview.ddim_steps must be >= 1".into());
        }
        if self.output.eval_views == 0 || self.output.turntable_views == 0 {
            return bad("output view counts must be >= 1".into());
        }
        self.coarse.field.validate()?;
        self.texture.field.validate()?;
        self.backview.injection.validate()?;
        self.weights.validate()?;
        Ok(())
    }

    /// Hash of everything that shapes optimization results. Paths and stage
    /// toggles are excluded so a moved or partially rerun workdir still resumes.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workdir = PathBuf::new();
        c.input_image = PathBuf::new();
        c.stages = StageToggles {
            coarse: true,
            backview: true,
            geometry: true,
            texture: true,
        };
        sha256_hex(c.to_toml().as_bytes())[..16].to_string()
    }

    /// Sets every working resolution at once. The coarse guidance renders
    /// keep their own size, which should match the denoiser's input.
    pub fn set_resolution(&mut self, res: usize) {
        self.preprocess.resolution = res;
        self.coarse.resolution = res;
        self.geometry.resolution = res;
        self.texture.resolution = res;
        self.texture.patch_size = self.texture.patch_size.min(res);
    }

    /// Sets the texture step count, keeping the refinement switch aligned.
    pub fn set_texture_steps(&mut self, steps: usize) {
        self.texture.steps = steps;
        if let Some(late) = &mut self.weights.texture.late {
            late.from_step = steps;
        }
    }

    /// Sets the geometry step count, moving the late-phase switch to the
    /// same fraction of the run.
    pub fn set_geometry_steps(&mut self, steps: usize) {
        let old = self.geometry.steps.max(1);
        if let Some(late) = &mut self.weights.geometry.late {
            late.from_step = (late.from_step as u128 * steps as u128 / old as u128) as usize;
        }
        self.geometry.steps = steps;
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.workdir.join(stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults_hold_published_values() {
        let c = RunConfig::paper_defaults();
        assert_eq!(c.camera.distance, 3.8);
        assert_eq!(c.camera.fov_deg, 20.0);
        assert_eq!(c.camera.coarse_elevation_deg, (-30.0, 60.0));
        assert_eq!(c.camera.fine_elevation_deg, (-45.0, 45.0));
        assert_eq!(c.camera.azimuth_deg, (-180.0, 180.0));
        assert_eq!(c.coarse.samples_per_ray, 512);
        assert_eq!((c.coarse.steps, c.coarse.lr, c.coarse.resolution, c.coarse.sds_batch), (3000, 5e-3, 128, 4));
        assert_eq!((c.geometry.steps, c.geometry.lr, c.geometry.tet_resolution), (3000, 1e-2, 256));
        assert_eq!((c.texture.steps, c.texture.refine_steps, c.texture.lr), (4000, 2000, 1e-3));
        assert_eq!((c.texture.resolution, c.texture.sds_batch), (648, 1));
        assert_eq!(c.weights, LossWeights::default());
        assert_eq!(c.coarse.field, HashGridConfig::coarse_default());
        assert_eq!(c.texture.field, HashGridConfig::texture_default());
        assert_eq!(c.coarse.sds, SdsConfig::view_default());
        assert_eq!(c.texture.view_sds, SdsConfig::view_default());
        assert_eq!(c.texture.text_sds, SdsConfig::text_default());
    }

    #[test]
    fn shipped_files_are_canonical() {
        assert_eq!(RunConfig::paper_defaults().to_toml(), PAPER_DEFAULTS_TOML);
        assert_eq!(RunConfig::desk().to_toml(), DESK_TOML);
    }

    #[test]
    fn serialization_round_trips() {
        for c in [RunConfig::paper_defaults(), RunConfig::desk()] {
            assert_eq!(RunConfig::from_toml_str(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{}\nbogus = 1\n", PAPER_DEFAULTS_TOML);
        assert!(matches!(RunConfig::from_toml_str(&text), Err(Error::Config(_))));
        let text = PAPER_DEFAULTS_TOML.replace("[coarse]\n", "[coarse]\nsurprise = true\n");
        assert!(RunConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn hash_ignores_paths_only() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        b.workdir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn step_overrides_keep_switches_aligned() {
        let mut c = RunConfig::paper_defaults();
        c.set_texture_steps(300);
        assert_eq!(c.weights.texture.late.unwrap().from_step, 300);
        c.set_geometry_steps(300);
        assert_eq!(c.weights.geometry.late.unwrap().from_step, 200);
        c.validate().unwrap();
    }
}
