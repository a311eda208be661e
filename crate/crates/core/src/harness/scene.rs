//! Seeded synthetic scenes of boxes and spheres on a ground plane, rendered
//! analytically as training targets.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::SceneConfig;
use super::{derived_rng, HarnessError};
use crate::geometry::{camera_rays, CameraRig, GridWarp, Ray};
use crate::renderer::Image;

/// Stream tag for scene layout randomness.
const SCENE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Box { min: [f64; 3], max: [f64; 3], albedo: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64, albedo: [f64; 3] },
}

impl Primitive {
    /// Axis-aligned bounds.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match *self {
            Primitive::Box { min, max, .. } => (min, max),
            Primitive::Sphere { center: c, radius: r, .. } => ([c[0] - r, c[1] - r, c[2] - r], [c[0] + r, c[1] + r, c[2] + r]),
        }
    }

    pub fn albedo(&self) -> [f64; 3] {
        match *self {
            Primitive::Box { albedo, .. } | Primitive::Sphere { albedo, .. } => albedo,
        }
    }

    /// Nearest hit `(t, unit normal)` with `t` in `[t0, t1]`.
    pub fn intersect(&self, ray: &Ray, t0: f64, t1: f64) -> Option<(f64, Vector3<f64>)> {
        match *self {
            Primitive::Box { min, max, .. } => {
                let (mut lo, mut hi) = (t0, t1);
                let mut normal = Vector3::zeros();
                for a in 0..3 {
                    let (o, d) = (ray.origin[a], ray.direction[a]);
                    if d == 0.0 {
                        if o < min[a] || o > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((min[a] - o) / d, (max[a] - o) / d);
                    let mut sign = -1.0;
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                        sign = 1.0;
                    }
                    if ta > lo {
                        lo = ta;
                        normal = Vector3::zeros();
                        normal[a] = sign;
                    }
                    hi = hi.min(tb);
                    if lo > hi {
                        return None;
                    }
                }
                // A ray starting inside the box sees it from within; treat as
                // no hit so cameras are never occluded by their own volume.
                (normal != Vector3::zeros()).then_some((lo, normal))
            }
            Primitive::Sphere { center, radius, .. } => {
                let oc = ray.origin - Vector3::from(center);
                let b = oc.dot(&ray.direction);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                if t < t0 || t > t1 {
                    return None;
                }
                Some((t, (ray.at(t) - Vector3::from(center)) / radius))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ground {
    pub z: f64,
    pub albedo: [f64; 3],
    pub checker: f64,
    /// Horizontal extent `[x_min, x_max, y_min, y_max]`.
    pub extent: [f64; 4],
}

impl Ground {
    pub fn intersect(&self, ray: &Ray, t0: f64, t1: f64) -> Option<f64> {
        let d = ray.direction.z;
        if d == 0.0 {
            return None;
        }
        let t = (self.z - ray.origin.z) / d;
        if t < t0 || t > t1 {
            return None;
        }
        let p = ray.at(t);
        let [x0, x1, y0, y1] = self.extent;
        (p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1).then_some(t)
    }

    pub fn albedo_at(&self, x: f64, y: f64) -> [f64; 3] {
        if self.checker <= 0.0 {
            return self.albedo;
        }
        let parity = ((x / self.checker).floor() + (y / self.checker).floor()).rem_euclid(2.0);
        let f = if parity < 0.5 { 1.0 } else { 0.6 };
        self.albedo.map(|a| a * f)
    }
}

/// Ground-truth view of one camera.
#[derive(Debug, Clone)]
pub struct GtView {
    pub rgb: Image,
    /// Hit distance along the unit ray; 0 where nothing is hit.
    pub depth: Image,
    /// 1 where a surface is hit.
    pub hit: Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub ground: Option<Ground>,
    pub background: [f64; 3],
    pub light_dir: [f64; 3],
    pub ambient: f64,
    pub seed: u64,
}

fn random_albedo<R: Rng>(rng: &mut R) -> [f64; 3] {
    [0.0; 3].map(|_| rng.random_range(0.15..0.95))
}

impl SyntheticScene {
    /// Deterministic layout from `seed`, clipped to the metric extent of
    /// `warp`.
    pub fn generate(cfg: &SceneConfig, seed: u64, warp: &GridWarp) -> Result<Self, HarnessError> {
        let (lo, hi) = warp.metric_bounds();
        let [rx0, rx1, ry0, ry1] = cfg.region;
        let (x0, x1, y0, y1) = (rx0.max(lo[0]), rx1.min(hi[0]), ry0.max(lo[1]), ry1.min(hi[1]));
        let [s0, s1] = cfg.size;
        if !(s0 > 0.0 && s1 >= s0) {
            return Err(HarnessError::Config(format!("scene size range {:?} is invalid", cfg.size)));
        }
        if x1 - x0 <= 2.0 * s1 || y1 - y0 <= 2.0 * s1 {
            return Err(HarnessError::Config("scene region is too small for its objects".into()));
        }
        let ground_z = cfg.ground_z.max(lo[2]);
        if ground_z + 3.0 * s1 > hi[2] {
            return Err(HarnessError::Config("objects do not fit under the grid ceiling".into()));
        }
        let mut rng = derived_rng(seed, SCENE_STREAM, 0);
        let place = |rng: &mut rand_chacha::ChaCha8Rng, r: f64| -> [f64; 2] {
            let mut p = [0.0; 2];
            // Rejection sampling outside the clearance disc; gives up on
            // regions that barely extend past it.
            for _ in 0..1000 {
                p = [rng.random_range(x0 + r..x1 - r), rng.random_range(y0 + r..y1 - r)];
                if (p[0] * p[0] + p[1] * p[1]).sqrt() - r * std::f64::consts::SQRT_2 >= cfg.clearance {
                    break;
                }
            }
            p
        };
        let mut primitives = Vec::new();
        for _ in 0..cfg.boxes {
            let half = [0; 3].map(|_| rng.random_range(s0..=s1));
            let [cx, cy] = place(&mut rng, half[0].max(half[1]));
            primitives.push(Primitive::Box {
                min: [cx - half[0], cy - half[1], ground_z],
                max: [cx + half[0], cy + half[1], ground_z + 2.0 * half[2]],
                albedo: random_albedo(&mut rng),
            });
        }
        for _ in 0..cfg.spheres {
            let r = rng.random_range(s0..=s1);
            let [cx, cy] = place(&mut rng, r);
            let lift = rng.random_range(0.0..=r);
            primitives.push(Primitive::Sphere {
                center: [cx, cy, ground_z + r + lift],
                radius: r,
                albedo: random_albedo(&mut rng),
            });
        }
        let ground = cfg.ground.then(|| Ground {
            z: ground_z,
            albedo: cfg.ground_albedo,
            checker: cfg.ground_checker,
            extent: [lo[0], hi[0], lo[1], hi[1]],
        });
        let scene = Self {
            primitives,
            ground,
            background: cfg.background,
            light_dir: cfg.light_dir,
            ambient: cfg.ambient,
            seed,
        };
        scene.check_extent(warp)?;
        Ok(scene)
    }

    /// Scene without objects or ground.
    pub fn empty(background: [f64; 3]) -> Self {
        Self {
            primitives: Vec::new(),
            ground: None,
            background,
            light_dir: [0.0, 0.0, 1.0],
            ambient: 1.0,
            seed: 0,
        }
    }

    pub fn check_extent(&self, warp: &GridWarp) -> Result<(), HarnessError> {
        let (lo, hi) = warp.metric_bounds();
        for (i, p) in self.primitives.iter().enumerate() {
            let (a, b) = p.bounds();
            if (0..3).any(|k| a[k] < lo[k] || b[k] > hi[k]) {
                return Err(HarnessError::Config(format!("primitive {i} leaves the grid extent")));
            }
        }
        Ok(())
    }

    /// Lambert shading with an ambient floor.
    pub fn shade(&self, albedo: [f64; 3], normal: &Vector3<f64>) -> [f64; 3] {
        let l = Vector3::from(self.light_dir).normalize();
        let lambert = normal.dot(&l).max(0.0);
        let k = self.ambient + (1.0 - self.ambient) * lambert;
        albedo.map(|a| (a * k).clamp(0.0, 1.0))
    }

    /// `(rgb, depth)` of the nearest surface, if any.
    pub fn trace(&self, ray: &Ray) -> Option<([f64; 3], f64)> {
        let mut best: Option<(f64, [f64; 3])> = None;
        let mut t_max = ray.t_far;
        for p in &self.primitives {
            if let Some((t, n)) = p.intersect(ray, ray.t_near, t_max) {
                t_max = t;
                best = Some((t, self.shade(p.albedo(), &n)));
            }
        }
        if let Some(g) = &self.ground {
            if let Some(t) = g.intersect(ray, ray.t_near, t_max) {
                let p = ray.at(t);
                let n = Vector3::new(0.0, 0.0, if ray.direction.z < 0.0 { 1.0 } else { -1.0 });
                best = Some((t, self.shade(g.albedo_at(p.x, p.y), &n)));
            }
        }
        best.map(|(t, c)| (c, t))
    }

    /// Renders camera `c` of `rig` through pixel centres.
    pub fn render(&self, rig: &CameraRig, c: usize, t_near: f64) -> Result<GtView, HarnessError> {
        let cam = rig.camera(c)?;
        let (w, h) = (cam.width, cam.height);
        let pixels: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |col| (r, col))).collect();
        let rays = camera_rays(rig, c, &pixels, t_near, f64::INFINITY)?;
        let traced = crate::par::map_collect(rays.len(), |i| self.trace(&rays[i]));
        let mut view = GtView {
            rgb: Image::new(w, h, 3),
            depth: Image::new(w, h, 1),
            hit: Image::new(w, h, 1),
        };
        for (i, t) in traced.into_iter().enumerate() {
            let (rgb, depth, hit) = match t {
                Some((rgb, d)) => (rgb, d, 1.0),
                None => (self.background, 0.0, 0.0),
            };
            view.rgb.data[i * 3..i * 3 + 3].copy_from_slice(&rgb);
            view.depth.data[i] = depth;
            view.hit.data[i] = hit;
        }
        Ok(view)
    }

    pub fn render_rig(&self, rig: &CameraRig, t_near: f64) -> Result<Vec<GtView>, HarnessError> {
        (0..rig.len()).map(|c| self.render(rig, c, t_near)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AxisWarp, RigFacing};
    use crate::harness::config::RigConfig;

    fn warp() -> GridWarp {
        GridWarp {
            x: AxisWarp::symmetric(32, 12, 0.5, 2.0),
            y: AxisWarp::symmetric(32, 12, 0.5, 2.0),
            z: AxisWarp::one_sided(16, 12, 0.25, 1.0, -1.0),
        }
    }

    fn scene(seed: u64) -> SyntheticScene {
        let cfg = SceneConfig {
            region: [-12.0, 12.0, -12.0, 12.0],
            clearance: 3.0,
            size: [0.4, 1.0],
            ground_checker: 1.0,
            ..SceneConfig::default()
        };
        SyntheticScene::generate(&cfg, seed, &warp()).unwrap()
    }

    fn rig() -> CameraRig {
        RigConfig {
            cameras: 3,
            width: 48,
            height: 32,
            facing: RigFacing::All,
            ..RigConfig::default()
        }
        .build()
    }

    /// Independent intersection code: boxes as six bounded face planes,
    /// spheres by the geometric closest-approach construction.
    fn oracle_trace(s: &SyntheticScene, ray: &Ray) -> Option<([f64; 3], f64)> {
        let mut best: Option<(f64, [f64; 3])> = None;
        let mut consider = |t: f64, c: [f64; 3]| {
            if t >= ray.t_near && t <= ray.t_far && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, c));
            }
        };
        for p in &s.primitives {
            match *p {
                Primitive::Box { min, max, albedo } => {
                    for a in 0..3 {
                        for (face, sign) in [(min[a], -1.0), (max[a], 1.0)] {
                            let d = ray.direction[a];
                            if d == 0.0 || (d > 0.0) == (sign > 0.0) {
                                continue;
                            }
                            let t = (face - ray.origin[a]) / d;
                            let q = ray.at(t);
                            let inside = (0..3).filter(|&b| b != a).all(|b| q[b] >= min[b] && q[b] <= max[b]);
                            if inside {
                                let mut n = Vector3::zeros();
                                n[a] = sign;
                                consider(t, s.shade(albedo, &n));
                            }
                        }
                    }
                }
                Primitive::Sphere { center, radius, albedo } => {
                    let c = Vector3::from(center);
                    let tc = (c - ray.origin).dot(&ray.direction);
                    let d2 = (c - ray.origin).norm_squared() - tc * tc;
                    if d2 <= radius * radius {
                        let t = tc - (radius * radius - d2).sqrt();
                        consider(t, s.shade(albedo, &((ray.at(t) - c) / radius)));
                    }
                }
            }
        }
        if let Some(g) = &s.ground {
            let t = (g.z - ray.origin.z) / ray.direction.z;
            let q = ray.at(t);
            let [x0, x1, y0, y1] = g.extent;
            if t.is_finite() && q.x >= x0 && q.x <= x1 && q.y >= y0 && q.y <= y1 {
                let n = Vector3::new(0.0, 0.0, -ray.direction.z.signum());
                consider(t, s.shade(g.albedo_at(q.x, q.y), &n));
            }
        }
        best.map(|(t, c)| (c, t))
    }

    #[test]
    fn same_seed_same_images() {
        let (a, b) = (scene(3), scene(3));
        assert_eq!(a, b);
        let va = a.render(&rig(), 1, 0.1).unwrap();
        let vb = b.render(&rig(), 1, 0.1).unwrap();
        assert_eq!(va.rgb.data, vb.rgb.data);
        assert_ne!(scene(4), a);
    }

    #[test]
    fn empty_scene_is_background() {
        let s = SyntheticScene::empty([0.1, 0.2, 0.3]);
        let v = s.render(&rig(), 0, 0.1).unwrap();
        assert!(v.rgb.data.chunks(3).all(|p| p == [0.1, 0.2, 0.3]));
        assert!(v.hit.data.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn primitives_stay_inside_the_grid() {
        for seed in 0..20 {
            scene(seed).check_extent(&warp()).unwrap();
        }
    }

    #[test]
    fn renderer_matches_brute_force_oracle() {
        let rig = rig();
        for seed in [0, 1, 2] {
            let s = scene(seed);
            for c in 0..rig.len() {
                let v = s.render(&rig, c, 0.1).unwrap();
                let cam = &rig.cameras[c];
                let mut hits = 0;
                for r in 0..cam.height {
                    for col in 0..cam.width {
                        let ray = cam.ray_through(col as f64 + 0.5, r as f64 + 0.5, 0.1, f64::INFINITY);
                        let i = r * cam.width + col;
                        match oracle_trace(&s, &ray) {
                            Some((rgb, t)) => {
                                hits += 1;
                                assert_eq!(v.hit.data[i], 1.0);
                                // Sphere normals come from slightly different hit
                                // points in the two codes; allow rounding.
                                for (a, b) in v.rgb.data[i * 3..i * 3 + 3].iter().zip(rgb) {
                                    assert!((a - b).abs() < 1e-12, "pixel {i}: {a} vs {b}");
                                }
                                assert!((v.depth.data[i] - t).abs() < 1e-9 * t.max(1.0));
                            }
                            None => {
                                assert_eq!(v.hit.data[i], 0.0);
                                assert_eq!(&v.rgb.data[i * 3..i * 3 + 3], &s.background);
                            }
                        }
                    }
                }
                assert!(hits > 0);
            }
        }
    }
}
