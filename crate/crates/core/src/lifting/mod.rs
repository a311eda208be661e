//! Lifting posed camera images into a triplane.
//!
//! Images are encoded by a strided conv stack. A dense grid of 3D queries,
//! initialised with a sinusoidal encoding of each cell position, attends to
//! the feature maps around the projection of its cell centre (per image) and
//! then fuses the per-camera results (cross image). After the attention
//! rounds the query volume is averaged along each axis into three planes.

mod attention;
mod encoder;
mod pe;

use std::cmp::Ordering;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{deform_sample, fuse_cameras, AttentionRound, Reference};
pub use encoder::ImageEncoder;
pub use pe::{encode_position, sinusoidal_pe};

use crate::geometry::{CameraRig, GeometryError, GridWarp};
use crate::ndtensor::{ParamStore, Tensor, TensorError};
use crate::par;
use crate::renderer::Image;
use crate::triplane::Triplane;

#[derive(Debug, thiserror::Error)]
pub enum LiftError {
    #[error("lift config: {0}")]
    Config(String),
    #[error("{images} images for a rig of {cameras} cameras")]
    CameraCount { images: usize, cameras: usize },
    #[error("image {height}x{width} is not divisible by the encoder stride {stride}")]
    IndivisibleResolution { height: usize, width: usize, stride: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiftConfig {
    /// Feature width `D_f` of images, queries and planes.
    pub feature_dim: usize,
    /// Width of the intermediate encoder stages.
    pub encoder_hidden: usize,
    /// Number of stride-2 stages; total stride is `2^stages`.
    pub encoder_stages: usize,
    /// Sampling offsets per query.
    pub offsets: usize,
    /// Per-image + cross-image rounds.
    pub rounds: usize,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self {
            feature_dim: 192,
            encoder_hidden: 64,
            encoder_stages: 4,
            offsets: 4,
            rounds: 2,
        }
    }
}

impl LiftConfig {
    pub fn stride(&self) -> usize {
        1 << self.encoder_stages
    }

    pub fn validate(&self) -> Result<(), LiftError> {
        if self.feature_dim == 0 || self.feature_dim % 6 != 0 {
            return Err(LiftError::Config(format!(
                "feature_dim {} must be a positive multiple of 6 (sin/cos pairs over 3 axes)",
                self.feature_dim
            )));
        }
        if self.encoder_stages == 0 || self.offsets == 0 || self.rounds == 0 {
            return Err(LiftError::Config("encoder_stages, offsets and rounds must be positive".into()));
        }
        Ok(())
    }
}

/// Mean of a `[S_x * S_y * S_z, D]` query volume along each axis.
pub fn collapse_to_triplane(q: &Tensor, warp: &GridWarp) -> Result<[Tensor; 3], TensorError> {
    let [sx, sy, sz] = warp.cells();
    let d = q.shape()[1];
    let v = q.reshape(&[sx, sy, sz, d])?;
    Ok([v.mean_along_axis(2)?, v.mean_along_axis(1)?, v.mean_along_axis(0)?])
}

fn camera_key(rig: &CameraRig, c: usize) -> Vec<f64> {
    let cam = &rig.cameras[c];
    let k = cam.intrinsics;
    let mut key = cam.rotation.to_vec();
    key.extend(cam.translation);
    key.extend([k.fx, k.fy, k.cx, k.cy, cam.width as f64, cam.height as f64]);
    key
}

/// Processing order of cameras that depends only on the set of (camera,
/// image) pairs, never on their listed order.
pub fn canonical_order(rig: &CameraRig, images: &[Image]) -> Vec<usize> {
    let cmp_slices = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or_else(|| a.len().cmp(&b.len()))
    };
    let mut order: Vec<usize> = (0..rig.len()).collect();
    order.sort_by(|&a, &b| {
        match cmp_slices(&camera_key(rig, a), &camera_key(rig, b)) {
            Ordering::Equal => cmp_slices(&images[a].data, &images[b].data),
            o => o,
        }
    });
    order
}

/// Encoder plus attention rounds.
#[derive(Debug, Clone)]
pub struct Lifter {
    pub config: LiftConfig,
    pub encoder: ImageEncoder,
    pub rounds: Vec<AttentionRound>,
}

impl Lifter {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: &LiftConfig, rng: &mut R) -> Result<(), LiftError> {
        cfg.validate()?;
        ImageEncoder::init(store, 3, cfg.encoder_hidden, cfg.feature_dim, cfg.encoder_stages, rng)?;
        for r in 0..cfg.rounds {
            AttentionRound::init(store, r, cfg.feature_dim, cfg.offsets, rng)?;
        }
        Ok(())
    }

    pub fn from_store(store: &ParamStore, cfg: &LiftConfig) -> Result<Self, LiftError> {
        cfg.validate()?;
        let encoder = ImageEncoder::from_store(store)?;
        if encoder.stride() != cfg.stride() || encoder.out_dim() != cfg.feature_dim {
            return Err(LiftError::Config(format!(
                "checkpoint encoder has stride {} and width {}, config asks for {} and {}",
                encoder.stride(),
                encoder.out_dim(),
                cfg.stride(),
                cfg.feature_dim
            )));
        }
        let rounds = (0..cfg.rounds)
            .map(|r| AttentionRound::from_store(store, r))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            config: cfg.clone(),
            encoder,
            rounds,
        })
    }

    /// Feature-map reference point of every query cell in camera `c`.
    pub fn references(&self, rig: &CameraRig, c: usize, warp: &GridWarp) -> Result<Vec<Reference>, LiftError> {
        let cam = rig.camera(c)?;
        let [sx, sy, sz] = warp.cells();
        let s = self.encoder.stride() as f64;
        Ok(par::map_collect(sx * sy * sz, |row| {
            let (i, j, k) = (row / (sy * sz), (row / sz) % sy, row % sz);
            let p = cam.project(warp.cell_center_ego(i, j, k));
            p.visible.then(|| [p.v / s - 0.5, p.u / s - 0.5])
        }))
    }

    /// The `[S_x * S_y * S_z, D_f]` query volume after all attention rounds.
    pub fn lift_volume(&self, images: &[Image], rig: &CameraRig, warp: &GridWarp) -> Result<Tensor, LiftError> {
        if images.len() != rig.len() || rig.is_empty() {
            return Err(LiftError::CameraCount {
                images: images.len(),
                cameras: rig.len(),
            });
        }
        rig.validate()?;
        for (c, img) in images.iter().enumerate() {
            let cam = &rig.cameras[c];
            if img.width != cam.width || img.height != cam.height || img.channels != 3 {
                return Err(LiftError::Config(format!(
                    "image {c} is {}x{}x{}, camera expects {}x{}x3",
                    img.height, img.width, img.channels, cam.height, cam.width
                )));
            }
        }
        let order = canonical_order(rig, images);
        let dim = self.config.feature_dim;
        let feats = order
            .iter()
            .map(|&c| self.encoder.encode(&images[c].to_tensor()?))
            .collect::<Result<Vec<_>, _>>()?;
        let refs = order
            .iter()
            .map(|&c| self.references(rig, c, warp).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        let visible = Arc::new(refs.iter().map(|r| r.iter().map(Option::is_some).collect()).collect::<Vec<Vec<bool>>>());
        let [sx, sy, sz] = warp.cells();
        let mut q = Tensor::new(sinusoidal_pe(warp, dim), &[sx * sy * sz, dim])?;
        for round in &self.rounds {
            let updates = feats
                .iter()
                .zip(&refs)
                .map(|(f, r)| round.per_image(&q, f, r.clone()))
                .collect::<Result<Vec<_>, _>>()?;
            q = round.cross_image(&q, &updates, visible.clone())?;
        }
        Ok(q)
    }

    pub fn lift(&self, images: &[Image], rig: &CameraRig, warp: &GridWarp) -> Result<Triplane, LiftError> {
        let q = self.lift_volume(images, rig, warp)?;
        let [xy, xz, yz] = collapse_to_triplane(&q, warp)?;
        Ok(Triplane {
            xy,
            xz,
            yz,
            warp: *warp,
            facing: rig.facing,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AxisWarp, RigFacing};
    use crate::ndtensor::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_warp() -> GridWarp {
        GridWarp {
            x: AxisWarp::symmetric(4, 1, 2.0, 4.0),
            y: AxisWarp::symmetric(4, 1, 2.0, 4.0),
            z: AxisWarp::one_sided(2, 1, 1.0, 2.0, -0.5),
        }
    }

    fn cfg() -> LiftConfig {
        LiftConfig {
            feature_dim: 6,
            encoder_hidden: 4,
            encoder_stages: 2,
            offsets: 2,
            rounds: 2,
        }
    }

    fn images(rig: &CameraRig, seed: u64) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rig.cameras
            .iter()
            .map(|c| {
                let mut img = Image::new(c.width, c.height, 3);
                img.data.iter_mut().for_each(|v| *v = rng.random());
                img
            })
            .collect()
    }

    fn lifter(seed: u64) -> (ParamStore, Lifter) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        Lifter::init(&mut store, &cfg(), &mut rng).unwrap();
        let l = Lifter::from_store(&store, &cfg()).unwrap();
        (store, l)
    }

    #[test]
    fn collapse_matches_loops() {
        let warp = GridWarp {
            x: AxisWarp::symmetric(4, 1, 1.0, 2.0),
            y: AxisWarp::symmetric(4, 1, 1.0, 2.0),
            z: AxisWarp::one_sided(4, 2, 1.0, 2.0, 0.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v: Vec<f64> = (0..64 * 3).map(|_| rng.random()).collect();
        let [xy, xz, yz] = collapse_to_triplane(&Tensor::new(v.clone(), &[64, 3]).unwrap(), &warp).unwrap();
        let at = |i: usize, j: usize, k: usize, d: usize| v[((i * 4 + j) * 4 + k) * 3 + d];
        for a in 0..4 {
            for b in 0..4 {
                for d in 0..3 {
                    let m = |f: &dyn Fn(usize) -> f64| (0..4).map(f).sum::<f64>() / 4.0;
                    assert_eq!(xy.data()[(a * 4 + b) * 3 + d], m(&|k| at(a, b, k, d)));
                    assert_eq!(xz.data()[(a * 4 + b) * 3 + d], m(&|j| at(a, j, b, d)));
                    assert_eq!(yz.data()[(a * 4 + b) * 3 + d], m(&|i| at(i, a, b, d)));
                }
            }
        }
    }

    #[test]
    fn shape_is_independent_of_cameras_and_resolution() {
        let (_, l) = lifter(1);
        let warp = tiny_warp();
        for (n, w, h) in [(1, 16, 8), (3, 16, 8), (4, 32, 16)] {
            let rig = CameraRig::ring(n, w, h, 1.5, RigFacing::All);
            let tp = l.lift(&images(&rig, 2), &rig, &warp).unwrap();
            assert_eq!(tp.xy.shape(), &[4, 4, 6]);
            assert_eq!(tp.xz.shape(), &[4, 2, 6]);
            assert_eq!(tp.yz.shape(), &[4, 2, 6]);
        }
    }

    #[test]
    fn permuting_cameras_is_bit_exact() {
        let (_, l) = lifter(3);
        let warp = tiny_warp();
        let rig = CameraRig::ring(3, 16, 8, 1.5, RigFacing::All);
        let imgs = images(&rig, 4);
        let a = l.lift_volume(&imgs, &rig, &warp).unwrap();
        let perm = [2, 0, 1];
        let rig2 = CameraRig::new(perm.iter().map(|&i| rig.cameras[i].clone()).collect(), RigFacing::All);
        let imgs2: Vec<Image> = perm.iter().map(|&i| imgs[i].clone()).collect();
        let b = l.lift_volume(&imgs2, &rig2, &warp).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn invisible_queries_keep_their_encoding() {
        let (_, l) = lifter(5);
        let warp = tiny_warp();
        let rig = CameraRig::ring(1, 16, 8, 0.5, RigFacing::All);
        let q = l.lift_volume(&images(&rig, 6), &rig, &warp).unwrap();
        let refs = l.references(&rig, 0, &warp).unwrap();
        let pe = sinusoidal_pe(&warp, 6);
        assert!(refs.iter().any(Option::is_none));
        for (i, r) in refs.iter().enumerate() {
            if r.is_none() {
                assert_eq!(&q.data()[i * 6..(i + 1) * 6], &pe[i * 6..(i + 1) * 6]);
            }
        }
    }

    #[test]
    fn camera_count_mismatch_is_a_config_error() {
        let (_, l) = lifter(7);
        let rig = CameraRig::ring(2, 16, 8, 1.5, RigFacing::All);
        let imgs = images(&rig, 8);
        assert!(matches!(
            l.lift(&imgs[..1], &rig, &tiny_warp()),
            Err(LiftError::CameraCount { images: 1, cameras: 2 })
        ));
    }

    #[test]
    fn lift_gradients_match_finite_differences() {
        let (store, _) = lifter(9);
        let warp = GridWarp {
            x: AxisWarp::symmetric(2, 1, 2.0, 4.0),
            y: AxisWarp::symmetric(2, 1, 2.0, 4.0),
            z: AxisWarp::one_sided(2, 1, 1.0, 2.0, -0.5),
        };
        let rig = CameraRig::ring(2, 16, 8, 1.5, RigFacing::All);
        let imgs = images(&rig, 10);
        let names = store.names();
        // Nudge the zero-initialised offset layers so their gradients are exercised away from zero.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let thetas: Vec<Tensor> = names
            .iter()
            .map(|n| {
                let t = store.get(n).unwrap();
                let v = t.data().iter().map(|x| x + 0.1 * rng.random_range(-1.0..1.0)).collect();
                Tensor::param(v, t.shape()).unwrap()
            })
            .collect();
        let wts: Vec<f64> = (0..8 * 6).map(|i| (i as f64 * 0.61).sin()).collect();
        let report = grad_check_many(
            |t| {
                let mut s = ParamStore::new();
                for (n, p) in names.iter().zip(t) {
                    s.insert_tensor(n, p.clone());
                }
                let l = Lifter::from_store(&s, &cfg()).unwrap();
                let q = l.lift_volume(&imgs, &rig, &warp).unwrap();
                q.mul(&Tensor::new(wts.clone(), &[8, 6])?).map(|x| x.sum())
            },
            &thetas,
            1e-6,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
