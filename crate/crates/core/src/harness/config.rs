//! Experiment configuration: one TOML file per experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::geometry::{Camera, CameraRig, GridWarp, Intrinsics, RigFacing};
use crate::lifting::LiftConfig;
use crate::renderer::{LossConfig, RenderConfig};
use crate::tokenizer::PatchConfig;
use crate::triplane::{Aggregation, DecoderConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Root seed; scene layout, initialisation and per-step sampling all
    /// derive from it.
    pub seed: u64,
    pub scene: SceneConfig,
    pub rig: RigConfig,
    pub warp: GridWarp,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tokenize: PatchConfig,
    pub profile: ProfileConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            rig: RigConfig::default(),
            warp: GridWarp::driving_default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tokenize: PatchConfig::default(),
            profile: ProfileConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.warp.validate()?;
        self.rig.validate()?;
        self.model.render.validate()?;
        self.train.loss.validate()?;
        self.train.validate()?;
        if self.model.mode == TrainMode::Lift {
            self.model.lift.validate()?;
            let s = self.model.lift.stride();
            if self.rig.width % s != 0 || self.rig.height % s != 0 {
                return Err(HarnessError::Config(format!(
                    "rig resolution {}x{} is not divisible by the encoder stride {s}",
                    self.rig.height, self.rig.width
                )));
            }
        }
        if self.model.feature_dim() == 0 {
            return Err(HarnessError::Config("feature_dim must be positive".into()));
        }
        Ok(())
    }
}

/// How the triplane is produced during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Planes come from lifting the training images; the encoder and
    /// attention weights are trained.
    #[default]
    Lift,
    /// Planes are free parameters optimised directly.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mode: TrainMode,
    pub lift: LiftConfig,
    pub decoder: DecoderConfig,
    pub aggregation: Aggregation,
    pub render: RenderConfig,
    /// Initial plane values in direct mode, `N(mean, std)`.
    pub plane_init_mean: f64,
    pub plane_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Lift,
            lift: LiftConfig::default(),
            decoder: DecoderConfig::default(),
            aggregation: Aggregation::Product,
            render: RenderConfig::default(),
            plane_init_mean: 1.0,
            plane_init_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.lift.feature_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    /// Image patches per step; each patch is drawn from a random camera.
    pub patches: usize,
    /// Side length of the square patches, in pixels.
    pub patch_size: usize,
    pub lr_planes: f64,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    /// Final learning rate as a fraction of the initial one.
    pub lr_floor: f64,
    pub loss: LossConfig,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            patches: 16,
            patch_size: 8,
            lr_planes: 1e-3,
            lr_encoder: 1e-4,
            lr_decoder: 1e-3,
            lr_floor: 0.1,
            loss: LossConfig::default(),
            eval_every: 250,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.patches == 0 || self.patch_size == 0 {
            return Err(HarnessError::Config("patches and patch_size must be positive".into()));
        }
        for (name, v) in [
            ("lr_planes", self.lr_planes),
            ("lr_encoder", self.lr_encoder),
            ("lr_decoder", self.lr_decoder),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(HarnessError::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(HarnessError::Config(format!("lr_floor must lie in [0, 1], got {}", self.lr_floor)));
        }
        Ok(())
    }

    /// Learning rate of a parameter by name prefix.
    pub fn base_lr(&self, name: &str) -> f64 {
        if name.starts_with("plane.") {
            self.lr_planes
        } else if name.starts_with("decoder.") {
            self.lr_decoder
        } else {
            self.lr_encoder
        }
    }
}

/// Camera rig generated from a handful of numbers, or listed explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    pub cameras: usize,
    pub width: usize,
    pub height: usize,
    pub fov_x_deg: f64,
    pub facing: RigFacing,
    /// Ego position shared by all cameras.
    pub position: [f64; 3],
    /// Downward tilt.
    pub pitch_deg: f64,
    /// Total heading spread of a front-facing fan.
    pub fan_deg: f64,
    /// Extra headings used only for evaluation.
    pub heldout_yaw_deg: Vec<f64>,
    /// Overrides the generated cameras when non-empty.
    pub explicit: Vec<Camera>,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            cameras: 4,
            width: 512,
            height: 320,
            fov_x_deg: 90.0,
            facing: RigFacing::All,
            position: [0.0, 0.0, 1.5],
            pitch_deg: 5.0,
            fan_deg: 90.0,
            heldout_yaw_deg: Vec::new(),
            explicit: Vec::new(),
        }
    }
}

impl RigConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.explicit.is_empty() {
            if self.cameras == 0 || self.width == 0 || self.height == 0 {
                return Err(HarnessError::Config("rig needs at least one camera and a positive resolution".into()));
            }
            if !(self.fov_x_deg > 0.0 && self.fov_x_deg < 180.0) {
                return Err(HarnessError::Config(format!("fov_x_deg must lie in (0, 180), got {}", self.fov_x_deg)));
            }
        }
        self.build().validate()?;
        Ok(())
    }

    fn intrinsics(&self) -> Intrinsics {
        let fx = self.width as f64 / 2.0 / (self.fov_x_deg.to_radians() / 2.0).tan();
        Intrinsics {
            fx,
            fy: fx,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
        }
    }

    fn camera(&self, name: &str, yaw_deg: f64) -> Camera {
        Camera::look_from(
            name,
            self.position,
            yaw_deg.to_radians(),
            self.pitch_deg.to_radians(),
            self.intrinsics(),
            self.width,
            self.height,
        )
    }

    /// Headings of the generated cameras in degrees.
    pub fn yaws_deg(&self) -> Vec<f64> {
        let n = self.cameras;
        (0..n)
            .map(|i| match self.facing {
                RigFacing::All => 360.0 * i as f64 / n as f64,
                RigFacing::Front if n > 1 => (i as f64 / (n - 1) as f64 - 0.5) * self.fan_deg,
                RigFacing::Front => 0.0,
            })
            .collect()
    }

    pub fn build(&self) -> CameraRig {
        if !self.explicit.is_empty() {
            return CameraRig::new(self.explicit.clone(), self.facing);
        }
        let cams = self.yaws_deg().iter().enumerate().map(|(i, &y)| self.camera(&format!("cam{i}"), y)).collect();
        CameraRig::new(cams, self.facing)
    }

    /// Evaluation-only cameras at `heldout_yaw_deg`.
    pub fn build_heldout(&self) -> CameraRig {
        let cams = self
            .heldout_yaw_deg
            .iter()
            .enumerate()
            .map(|(i, &y)| self.camera(&format!("heldout{i}"), y))
            .collect();
        CameraRig::new(cams, self.facing)
    }
}

/// Random scene layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Scene seed; the experiment seed when absent.
    pub seed: Option<u64>,
    pub boxes: usize,
    pub spheres: usize,
    pub ground: bool,
    pub ground_z: f64,
    pub ground_albedo: [f64; 3],
    /// Checker cell size of the ground texture in metres; 0 for a flat
    /// ground.
    pub ground_checker: f64,
    pub background: [f64; 3],
    /// Placement region `[x_min, x_max, y_min, y_max]` in ego metres.
    pub region: [f64; 4],
    /// Objects keep at least this horizontal distance from the ego origin.
    pub clearance: f64,
    /// Range of box half-sizes and sphere radii.
    pub size: [f64; 2],
    pub light_dir: [f64; 3],
    pub ambient: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: None,
            boxes: 6,
            spheres: 4,
            ground: true,
            ground_z: 0.0,
            ground_albedo: [0.45, 0.45, 0.42],
            ground_checker: 0.0,
            background: [0.55, 0.7, 0.9],
            region: [-30.0, 30.0, -30.0, 30.0],
            clearance: 4.0,
            size: [0.5, 2.0],
            light_dir: [0.4, 0.3, 1.0],
            ambient: 0.35,
        }
    }
}

/// Profiler axes and measurement settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileConfig {
    pub cameras: Vec<usize>,
    pub frames: Vec<usize>,
    pub patches: Vec<[usize; 3]>,
    pub halfplane: bool,
    /// Backbones as `(d_model, layers)`.
    pub backbones: Vec<[usize; 2]>,
    /// Baseline per-camera image size and patch size.
    pub baseline_height: usize,
    pub baseline_width: usize,
    pub baseline_patch: usize,
    /// Runs per measured tokenizer timing.
    pub runs: usize,
    /// Reduced grid used for measured timings; the exact token counts always
    /// use `warp`.
    pub measure_cells: [usize; 3],
    pub measure_feature_dim: usize,
    pub measure_d_ar: usize,
    pub measure_image: [usize; 2],
    /// Width of the single attention layer timed as a prefill probe.
    pub probe_dim: usize,
    pub probe_runs: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            cameras: vec![1, 4, 7],
            frames: vec![1, 6],
            patches: vec![[4, 6, 6], [8, 8, 8]],
            halfplane: true,
            backbones: vec![[2048, 16], [3072, 28], [4096, 32]],
            baseline_height: 320,
            baseline_width: 512,
            baseline_patch: 32,
            runs: 100,
            measure_cells: [16, 16, 8],
            measure_feature_dim: 12,
            measure_d_ar: 64,
            measure_image: [32, 48],
            probe_dim: 32,
            probe_runs: 3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 7\n[rig]\ncameras = 2\n[train]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.rig.cameras, 2);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.loss.lambda_l1, 0.5);
        assert_eq!(cfg.train.loss.lambda_perceptual, 0.5);
        assert_eq!(cfg.warp, GridWarp::driving_default());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_toml("[rig]\ncameras = 0\n").is_err());
        assert!(ExperimentConfig::from_toml("[rig]\nwidth = 500\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nlr_planes = -1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[model.lift]\nfeature_dim = 7\n").is_err());
        assert!(ExperimentConfig::from_toml("bogus = [").is_err());
    }

    #[test]
    fn front_fan_is_symmetric() {
        let rig = RigConfig {
            cameras: 3,
            facing: RigFacing::Front,
            fan_deg: 80.0,
            ..RigConfig::default()
        };
        assert_eq!(rig.yaws_deg(), vec![-40.0, 0.0, 40.0]);
        assert_eq!(rig.build().len(), 3);
    }
}
