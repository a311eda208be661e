//! Self-supervised training by volumetric rendering, and evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use super::{derived_rng, generate_scene, Checkpoint, ExperimentConfig, GtView, HarnessError, SyntheticScene, TrainMode};
use crate::geometry::{camera_rays, CameraRig};
use crate::lifting::Lifter;
use crate::ndtensor::{cosine_lr, round_f32, Adam, ParamStore, Tensor};
use crate::renderer::{
    depth_loss, psnr, reconstruction_loss, render_image, render_rays, Image, Perceptual, RadianceField, RenderedImage,
};
use crate::tokenizer::{tokenize, PatchConfig, TokenProjection, TokenSequence};
use crate::triplane::{DecoderMlp, Triplane};

const INIT_STREAM: u64 = 2;
const STEP_STREAM: u64 = 3;
const TOKEN_STREAM: u64 = 4;

pub const CHECKPOINT_NAME: &str = "checkpoint.ckpt";
pub const LAST_GOOD_NAME: &str = "last_good.ckpt";
pub const METRICS_NAME: &str = "metrics.csv";

/// A config together with its scene, rig and ground-truth views.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub scene: SyntheticScene,
    pub rig: CameraRig,
    pub views: Vec<GtView>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let scene = generate_scene(&config)?;
        let rig = config.rig.build();
        let views = scene.render_rig(&rig, config.model.render.t_near)?;
        Ok(Self { config, scene, rig, views })
    }

    pub fn images(&self) -> Vec<Image> {
        self.views.iter().map(|v| v.rgb.clone()).collect()
    }

    /// Fresh parameters, rounded to checkpoint precision.
    pub fn init_params(&self) -> Result<ParamStore, HarnessError> {
        let cfg = &self.config;
        let mut rng = derived_rng(cfg.seed, INIT_STREAM, 0);
        let mut store = ParamStore::new();
        let dim = cfg.model.feature_dim();
        match cfg.model.mode {
            TrainMode::Lift => Lifter::init(&mut store, &cfg.model.lift, &mut rng)?,
            TrainMode::Direct => {
                let t = Triplane::random(
                    cfg.warp,
                    dim,
                    cfg.model.plane_init_mean,
                    cfg.model.plane_init_std,
                    self.rig.facing,
                    &mut rng,
                );
                t.write_to_store(&mut store)?;
            }
        }
        DecoderMlp::init(&mut store, dim, &cfg.model.decoder, &mut rng)?;
        let mut rounded = ParamStore::new();
        for (name, t) in store.iter() {
            rounded.insert(name, t.data().iter().map(|&v| round_f32(v)).collect(), t.shape())?;
        }
        Ok(rounded)
    }

    /// The triplane for the training images under `params`.
    pub fn triplane(&self, params: &ParamStore) -> Result<Triplane, HarnessError> {
        let cfg = &self.config;
        Ok(match cfg.model.mode {
            TrainMode::Lift => Lifter::from_store(params, &cfg.model.lift)?.lift(&self.images(), &self.rig, &cfg.warp)?,
            TrainMode::Direct => Triplane::from_store(params, cfg.warp, self.rig.facing)?,
        })
    }

    pub fn field(&self, params: &ParamStore) -> Result<RadianceField, HarnessError> {
        let mut f = RadianceField::from_store(params, self.triplane(params)?)?;
        f.aggregation = self.config.model.aggregation;
        Ok(f)
    }

    /// Renders camera `c` of `rig` (any rig; the triplane always comes from
    /// the training views).
    pub fn render_view(&self, params: &ParamStore, rig: &CameraRig, c: usize) -> Result<RenderedImage, HarnessError> {
        let field = self.field(params)?.detach();
        Ok(render_image(&field, rig, c, &self.config.model.render)?)
    }

    /// Tokenizes the trained triplane. Projection weights missing from
    /// `params` are created from the root seed; their names are returned.
    pub fn tokenize(&self, params: &mut ParamStore, patch: &PatchConfig) -> Result<(TokenSequence, Vec<String>), HarnessError> {
        let triplane = self.triplane(params)?.detach();
        let mut rng = derived_rng(self.config.seed, TOKEN_STREAM, 0);
        let created = TokenProjection::ensure(params, patch, triplane.feature_dim(), &mut rng)?;
        let proj = TokenProjection::from_store(params)?;
        Ok((tokenize(&triplane, patch, &proj)?, created))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    /// Number of completed steps after this one.
    pub step: u64,
    pub loss: f64,
    pub lr_scale: f64,
}

/// Owns the parameters and optimizer state of one run.
pub struct Trainer<'a> {
    pub exp: &'a Experiment,
    pub params: ParamStore,
    pub state: ParamStore,
    adam: Adam,
    perceptual: Box<dyn Perceptual>,
}

impl<'a> Trainer<'a> {
    pub fn new(exp: &'a Experiment) -> Result<Self, HarnessError> {
        Ok(Self {
            params: exp.init_params()?,
            state: ParamStore::new(),
            adam: Adam::default(),
            perceptual: exp.config.train.loss.perceptual_impl(),
            exp,
        })
    }

    /// Continues from a checkpoint written by the same experiment.
    pub fn resume(exp: &'a Experiment, ckpt: Checkpoint) -> Result<Self, HarnessError> {
        if ckpt.config != exp.config {
            return Err(HarnessError::Config("checkpoint was written by a different experiment config".into()));
        }
        Ok(Self {
            adam: Adam::from_state(&ckpt.state),
            params: ckpt.params,
            state: ckpt.state,
            perceptual: exp.config.train.loss.perceptual_impl(),
            exp,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.adam.step_count()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.exp.config.clone(),
            params: self.params.clone(),
            state: self.state.clone(),
        }
    }

    /// One optimisation step on a random batch of patches. A non-finite
    /// loss leaves the parameters untouched.
    pub fn step(&mut self) -> Result<StepStats, HarnessError> {
        let exp = self.exp;
        let cfg = &exp.config;
        let tc = &cfg.train;
        let step = self.adam.step_count();
        let mut rng = derived_rng(cfg.seed, STEP_STREAM, step);

        let ps = tc.patch_size;
        let mut rays = Vec::with_capacity(tc.patches * ps * ps);
        let mut target = Vec::with_capacity(rays.capacity() * 3);
        let mut target_depth = Vec::with_capacity(rays.capacity());
        let mut hit = Vec::with_capacity(rays.capacity());
        for _ in 0..tc.patches {
            let c = rng.random_range(0..exp.rig.len());
            let cam = &exp.rig.cameras[c];
            if ps > cam.height || ps > cam.width {
                return Err(HarnessError::Config(format!(
                    "patch_size {ps} exceeds the {}x{} image",
                    cam.height, cam.width
                )));
            }
            let r0 = rng.random_range(0..=cam.height - ps);
            let c0 = rng.random_range(0..=cam.width - ps);
            let pixels: Vec<(usize, usize)> = (r0..r0 + ps).flat_map(|r| (c0..c0 + ps).map(move |col| (r, col))).collect();
            rays.extend(camera_rays(&exp.rig, c, &pixels, cfg.model.render.t_near, cfg.model.render.t_far_or_inf())?);
            let v = &exp.views[c];
            target.extend(v.rgb.gather(&pixels));
            target_depth.extend(v.depth.gather(&pixels));
            hit.extend(v.hit.gather(&pixels));
        }

        let field = exp.field(&self.params)?;
        let out = render_rays(&field, &rays, &cfg.model.render, Some(&mut rng))?;
        let pred = out.rgb.reshape(&[tc.patches, ps, ps, 3])?;
        let target = Tensor::new(target, &[tc.patches, ps, ps, 3])?;
        let mut loss = reconstruction_loss(&target, &pred, &tc.loss, self.perceptual.as_ref())?;
        if tc.loss.lambda_depth > 0.0 {
            let td = Tensor::new(target_depth, &[rays.len(), 1])?;
            loss = loss.add(&depth_loss(&td, &out.depth.mask_rows(&hit)?, tc.loss.lambda_depth)?)?;
        }
        let value = loss.item();
        if !value.is_finite() {
            return Err(HarnessError::NonFiniteLoss { step, checkpoint: None });
        }
        self.params.zero_grads();
        loss.backward()?;
        let scale = cosine_lr(1.0, step, tc.steps, tc.lr_floor);
        self.adam.step(&mut self.params, &mut self.state, |name| tc.base_lr(name) * scale)?;
        Ok(StepStats {
            step: step + 1,
            loss: value,
            lr_scale: scale,
        })
    }

    /// Trains up to `train.steps`, logging to `out_dir/metrics.csv` and
    /// checkpointing into `out_dir`. On a non-finite loss the last good
    /// state is written to `out_dir/last_good.ckpt` and the run aborts.
    pub fn run(&mut self, out_dir: Option<&Path>, mut on_step: impl FnMut(&StepStats, Option<&EvalReport>)) -> Result<Vec<StepStats>, HarnessError> {
        let tc = self.exp.config.train.clone();
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(METRICS_NAME);
                let fresh = self.steps_done() == 0 || !path.exists();
                let mut f = std::fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(path)?;
                if fresh {
                    writeln!(f, "step,loss,lr_scale,psnr,ssim")?;
                }
                Some(f)
            }
            None => None,
        };
        let mut history = Vec::new();
        while self.steps_done() < tc.steps {
            let stats = match self.step() {
                Ok(s) => s,
                Err(HarnessError::NonFiniteLoss { step, .. }) => {
                    let checkpoint = match out_dir {
                        Some(dir) => {
                            let p = dir.join(LAST_GOOD_NAME);
                            self.checkpoint().save(&p)?;
                            Some(p)
                        }
                        None => None,
                    };
                    log::error!("non-finite loss at step {step}, aborting");
                    return Err(HarnessError::NonFiniteLoss { step, checkpoint });
                }
                Err(e) => return Err(e),
            };
            let eval = (tc.eval_every > 0 && (stats.step % tc.eval_every == 0 || stats.step == tc.steps))
                .then(|| evaluate(self.exp, &self.params, false))
                .transpose()?;
            if let Some(f) = log.as_mut() {
                match &eval {
                    Some(e) => writeln!(f, "{},{},{},{},{}", stats.step, stats.loss, stats.lr_scale, e.mean_psnr, e.mean_ssim)?,
                    None => writeln!(f, "{},{},{},,", stats.step, stats.loss, stats.lr_scale)?,
                }
            }
            if let Some(e) = &eval {
                log::info!("step {} loss {:.5} psnr {:.2} ssim {:.3}", stats.step, stats.loss, e.mean_psnr, e.mean_ssim);
            }
            let save = tc.checkpoint_every > 0 && stats.step % tc.checkpoint_every == 0 || stats.step == tc.steps;
            if let (Some(dir), true) = (out_dir, save) {
                self.checkpoint().save(dir.join(CHECKPOINT_NAME))?;
            }
            on_step(&stats, eval.as_ref());
            history.push(stats);
        }
        Ok(history)
    }
}

/// Path of the regular checkpoint inside a run directory.
pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join(CHECKPOINT_NAME)
}

/// Means of consecutive non-overlapping windows.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values.chunks_exact(window.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

/// Whether the windowed mean of `values` never increases.
pub fn smoothed_nonincreasing(values: &[f64], window: usize) -> bool {
    window_means(values, window).windows(2).all(|w| w[1] <= w[0])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CameraMetrics {
    pub camera: String,
    pub heldout: bool,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub cameras: Vec<CameraMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn from_cameras(cameras: Vec<CameraMetrics>) -> Self {
        let n = cameras.len().max(1) as f64;
        Self {
            mean_psnr: cameras.iter().map(|c| c.psnr).sum::<f64>() / n,
            mean_ssim: cameras.iter().map(|c| c.ssim).sum::<f64>() / n,
            cameras,
        }
    }
}

/// PSNR/SSIM of every training pose, plus the configured held-out poses
/// when `heldout` is set.
pub fn evaluate(exp: &Experiment, params: &ParamStore, heldout: bool) -> Result<EvalReport, HarnessError> {
    let field = exp.field(params)?.detach();
    let rcfg = &exp.config.model.render;
    let mut cams = Vec::new();
    let mut score = |rig: &CameraRig, views: &[GtView], is_heldout: bool| -> Result<(), HarnessError> {
        for (c, v) in views.iter().enumerate() {
            let img = render_image(&field, rig, c, rcfg)?;
            cams.push(CameraMetrics {
                camera: rig.cameras[c].name.clone(),
                heldout: is_heldout,
                psnr: psnr(&v.rgb, &img.rgb)?,
                ssim: crate::renderer::ssim(&v.rgb, &img.rgb)?,
            });
        }
        Ok(())
    };
    score(&exp.rig, &exp.views, false)?;
    if heldout && !exp.config.rig.heldout_yaw_deg.is_empty() {
        let rig = exp.config.rig.build_heldout();
        let views = exp.scene.render_rig(&rig, rcfg.t_near)?;
        score(&rig, &views, true)?;
    }
    Ok(EvalReport::from_cameras(cams))
}
