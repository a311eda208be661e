//! Volume rendering of triplanes, training losses and image metrics.

mod composite;
mod image;
mod loss;
mod metrics;
mod sampling;

use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use self::image::{Image, ImageError};
pub use composite::{composite, ray_weights, DEPTH_EPS};
pub use loss::{depth_loss, l1_loss, reconstruction_loss, GradientPyramid, LossConfig, Perceptual, PerceptualKind};
pub use metrics::{mse, psnr, ssim, PSNR_CAP_DB};
pub use sampling::{bin_edges, place_samples, ray_box_interval, SamplingSpace};

use crate::geometry::{camera_rays, CameraRig, GeometryError, Ray};
use crate::ndtensor::{ParamStore, Tensor, TensorError};
use crate::triplane::{Aggregation, DecoderMlp, Triplane, TriplaneError};

const IMAGE_RAY_CHUNK: usize = 2048;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("{what}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        what: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid render config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Triplane(#[from] TriplaneError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub samples: usize,
    pub t_near: f64,
    /// `None` runs each ray to where it leaves the grid extent.
    pub t_far: Option<f64>,
    pub background: [f64; 3],
    pub stratified: bool,
    pub sampling: SamplingSpace,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            t_near: 0.2,
            t_far: None,
            background: [0.0; 3],
            stratified: false,
            sampling: SamplingSpace::WarpUniform,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.samples < 2 {
            return Err(RenderError::Config(format!("need at least 2 samples per ray, got {}", self.samples)));
        }
        if !(self.t_near >= 0.0) || self.t_far.is_some_and(|f| !(f > self.t_near)) {
            return Err(RenderError::Config(format!(
                "need 0 <= t_near < t_far, got {} and {:?}",
                self.t_near, self.t_far
            )));
        }
        Ok(())
    }

    pub fn t_far_or_inf(&self) -> f64 {
        self.t_far.unwrap_or(f64::INFINITY)
    }
}

/// A triplane with its decoder: everything needed to render.
#[derive(Debug, Clone)]
pub struct RadianceField {
    pub triplane: Triplane,
    pub decoder: DecoderMlp,
    pub aggregation: Aggregation,
}

impl RadianceField {
    pub fn new(triplane: Triplane, decoder: DecoderMlp) -> Self {
        Self {
            triplane,
            decoder,
            aggregation: Aggregation::Product,
        }
    }

    pub fn from_store(store: &ParamStore, triplane: Triplane) -> Result<Self, RenderError> {
        Ok(Self::new(triplane, DecoderMlp::from_store(store)?))
    }

    /// Copy that records no gradients.
    pub fn detach(&self) -> Self {
        Self {
            triplane: self.triplane.detach(),
            decoder: self.decoder.detach(),
            aggregation: self.aggregation,
        }
    }

    /// `(rgb [B, 3], sigma [B, 1])` at ego points; density is zero outside
    /// the grid extent.
    pub fn decode_points(&self, points: &[[f64; 3]]) -> Result<(Tensor, Tensor), RenderError> {
        let (feat, inside) = self.triplane.query(points, self.aggregation)?;
        let (rgb, sigma) = self.decoder.forward(&feat)?;
        Ok((rgb, sigma.mask_rows(&inside)?))
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// `[R, 3]`
    pub rgb: Tensor,
    /// `[R, 1]`, expected distance along the (unit) ray direction.
    pub depth: Tensor,
    /// `[R, 1]`
    pub opacity: Tensor,
}

/// Sample distances and intervals for one ray, clipped to the grid box.
pub fn ray_samples(ray: &Ray, field: &RadianceField, cfg: &RenderConfig, jitter: Option<&mut dyn RngCore>) -> (Vec<f64>, Vec<f64>) {
    let warp = &field.triplane.warp;
    let (lo, hi) = warp.metric_bounds();
    let t0 = ray.t_near;
    let exit = ray_box_interval(ray, lo, hi).map_or(t0, |(_, t)| t);
    let t1 = ray.t_far.min(exit).max(t0);
    let edges = bin_edges(ray, warp, cfg.sampling, cfg.samples, t0, t1);
    place_samples(&edges, jitter)
}

/// Differentiable batch render.
pub fn render_rays(
    field: &RadianceField,
    rays: &[Ray],
    cfg: &RenderConfig,
    mut jitter: Option<&mut dyn RngCore>,
) -> Result<RenderOutput, RenderError> {
    cfg.validate()?;
    let n = cfg.samples;
    let mut ts = Vec::with_capacity(rays.len() * n);
    let mut deltas = Vec::with_capacity(rays.len() * n);
    let mut points = Vec::with_capacity(rays.len() * n);
    for ray in rays {
        let rng: Option<&mut dyn RngCore> = match jitter.as_mut() {
            Some(r) if cfg.stratified => Some(&mut **r),
            _ => None,
        };
        let (t, d) = ray_samples(ray, field, cfg, rng);
        points.extend(t.iter().map(|&t| {
            let p = ray.at(t);
            [p.x, p.y, p.z]
        }));
        ts.extend(t);
        deltas.extend(d);
    }
    let (rgb, sigma) = field.decode_points(&points)?;
    let out = composite(&rgb, &sigma, Arc::new(ts), Arc::new(deltas), n, cfg.background)?;
    Ok(RenderOutput {
        rgb: out.narrow(1, 0, 3)?,
        depth: out.narrow(1, 3, 1)?,
        opacity: out.narrow(1, 4, 1)?,
    })
}

/// `(rgb, depth, opacity)` of a single ray, without gradients.
pub fn render_ray(field: &RadianceField, ray: &Ray, cfg: &RenderConfig) -> Result<([f64; 3], f64, f64), RenderError> {
    let out = render_rays(&field.detach(), std::slice::from_ref(ray), cfg, None)?;
    let c = out.rgb.data();
    Ok(([c[0], c[1], c[2]], out.depth.item(), out.opacity.item()))
}

#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub rgb: Image,
    pub depth: Image,
    pub opacity: Image,
}

/// Renders every pixel of camera `c`, in ray chunks, without gradients.
pub fn render_image(field: &RadianceField, rig: &CameraRig, c: usize, cfg: &RenderConfig) -> Result<RenderedImage, RenderError> {
    cfg.validate()?;
    let cam = rig.camera(c)?;
    let (w, h) = (cam.width, cam.height);
    let field = field.detach();
    let pixels: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |col| (r, col))).collect();
    let mut rgb = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut opacity = Image::new(w, h, 1);
    for (k, chunk) in pixels.chunks(IMAGE_RAY_CHUNK).enumerate() {
        let rays = camera_rays(rig, c, chunk, cfg.t_near, cfg.t_far_or_inf())?;
        let out = render_rays(&field, &rays, &RenderConfig { stratified: false, ..cfg.clone() }, None)?;
        let base = k * IMAGE_RAY_CHUNK;
        rgb.data[base * 3..(base + chunk.len()) * 3].copy_from_slice(out.rgb.data());
        depth.data[base..base + chunk.len()].copy_from_slice(out.depth.data());
        opacity.data[base..base + chunk.len()].copy_from_slice(out.opacity.data());
    }
    Ok(RenderedImage { rgb, depth, opacity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AxisWarp, GridWarp, RigFacing};
    use crate::ndtensor::grad_check_many;
    use crate::triplane::DecoderConfig;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn micro_warp() -> GridWarp {
        GridWarp {
            x: AxisWarp::symmetric(4, 1, 1.0, 2.0),
            y: AxisWarp::symmetric(4, 1, 1.0, 2.0),
            z: AxisWarp::one_sided(4, 2, 0.5, 1.0, -0.5),
        }
    }

    fn field(seed: u64, warp: GridWarp, dim: usize) -> (ParamStore, RadianceField) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tp = Triplane::random(warp, dim, 1.0, 0.5, RigFacing::All, &mut rng);
        let mut store = ParamStore::new();
        tp.write_to_store(&mut store).unwrap();
        let cfg = DecoderConfig { hidden: vec![8], density_bias: 0.0 };
        DecoderMlp::init(&mut store, dim, &cfg, &mut rng).unwrap();
        let tp = Triplane::from_store(&store, warp, RigFacing::All).unwrap();
        let f = RadianceField::from_store(&store, tp).unwrap();
        (store, f)
    }

    fn random_ray(rng: &mut ChaCha8Rng) -> Ray {
        let d = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Ray {
            origin: Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.5),
            direction: d.normalize(),
            t_near: 0.0,
            t_far: f64::INFINITY,
        }
    }

    #[test]
    fn zero_density_renders_background() {
        let (mut store, _) = field(0, micro_warp(), 3);
        store.insert("plane.xy", vec![0.0; 4 * 4 * 3], &[4, 4, 3]).unwrap();
        store.insert("decoder.out.bias", vec![0.0, 0.0, 0.0, -1e3], &[4]).unwrap();
        let tp = Triplane::from_store(&store, micro_warp(), RigFacing::All).unwrap();
        let f = RadianceField::from_store(&store, tp).unwrap();
        let cfg = RenderConfig { samples: 8, background: [0.2, 0.3, 0.4], ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let (rgb, _, o) = render_ray(&f, &random_ray(&mut rng), &cfg).unwrap();
            assert!(o < 1e-12);
            for (a, b) in rgb.iter().zip([0.2, 0.3, 0.4]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rendering_is_conservative_on_random_fields() {
        let (_, f) = field(2, micro_warp(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rays: Vec<Ray> = (0..500).map(|_| random_ray(&mut rng)).collect();
        let cfg = RenderConfig { samples: 16, stratified: true, ..Default::default() };
        let out = render_rays(&f.detach(), &rays, &cfg, Some(&mut rng)).unwrap();
        assert!(out.opacity.data().iter().all(|o| (0.0..=1.0 + 1e-12).contains(o)));
        assert!(out.rgb.data().iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn gradients_through_colour_and_depth_paths() {
        let (store, _) = field(4, micro_warp(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rays: Vec<Ray> = (0..6).map(|_| random_ray(&mut rng)).collect();
        let cfg = RenderConfig { samples: 8, ..Default::default() };
        let names = store.names();
        let thetas: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        let report = grad_check_many(
            |t| {
                let mut s = ParamStore::new();
                for (n, p) in names.iter().zip(t) {
                    s.insert_tensor(n, p.clone());
                }
                let tp = Triplane::from_store(&s, micro_warp(), RigFacing::All).unwrap();
                let f = RadianceField::from_store(&s, tp).unwrap();
                let out = render_rays(&f, &rays, &cfg, None).unwrap();
                let c = out.rgb.square().sum();
                let d = depth_loss(&Tensor::full(&[6, 1], 1.0), &out.depth, 0.7).unwrap();
                c.add(&d)
            },
            &thetas,
            1e-6,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
