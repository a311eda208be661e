use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Ideal pinhole camera. Camera frame: x right, y down, z along the optical
/// axis. `rotation`/`translation` map ego points into the camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    #[serde(default)]
    pub name: String,
    pub intrinsics: Intrinsics,
    /// Camera-from-ego rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

impl Camera {
    /// Camera at `position` (ego metres) looking along heading `yaw`
    /// (radians, counter-clockwise from +x) tilted down by `pitch`.
    pub fn look_from(
        name: &str,
        position: [f64; 3],
        yaw: f64,
        pitch: f64,
        intrinsics: Intrinsics,
        width: usize,
        height: usize,
    ) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = Vector3::new(cy * cp, sy * cp, -sp);
        let right = Vector3::new(sy, -cy, 0.0);
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * Vector3::from(position));
        Self {
            name: name.to_string(),
            intrinsics,
            rotation: row_major(&r),
            translation: [t.x, t.y, t.z],
            width,
            height,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.rotation)
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// Ego-frame position of the optical centre.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation_vector())
    }

    pub fn validate(&self, index: usize) -> Result<(), GeometryError> {
        let bad = |reason: String| Err(GeometryError::InvalidCamera { index, reason });
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return bad(format!("focal lengths must be positive, got {} {}", k.fx, k.fy));
        }
        if !(0.0..self.width as f64).contains(&k.cx) || !(0.0..self.height as f64).contains(&k.cy) {
            return bad(format!(
                "principal point ({}, {}) outside {}x{} image",
                k.cx, k.cy, self.width, self.height
            ));
        }
        let r = self.rotation_matrix();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return bad(format!("rotation is not orthonormal (|R^T R - I| = {err:e})"));
        }
        Ok(())
    }

    /// Pinhole projection of an ego point.
    pub fn project(&self, x: [f64; 3]) -> Projection {
        let p = self.rotation_matrix() * Vector3::from(x) + self.translation_vector();
        let depth = p.z;
        let k = &self.intrinsics;
        let u = k.fx * p.x / depth + k.cx;
        let v = k.fy * p.y / depth + k.cy;
        let visible = depth > 0.0
            && u >= 0.0
            && u < self.width as f64
            && v >= 0.0
            && v < self.height as f64;
        Projection { u, v, depth, visible }
    }

    /// Ego-frame ray through continuous pixel coordinates `(u, v)`.
    pub fn ray_through(&self, u: f64, v: f64, t_near: f64, t_far: f64) -> Ray {
        let k = &self.intrinsics;
        let d_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let direction = (self.rotation_matrix().transpose() * d_cam).normalize();
        Ray {
            origin: self.center(),
            direction,
            t_near,
            t_far,
        }
    }

    /// Same camera with the image resampled to `width x height`.
    pub fn rescaled(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let k = self.intrinsics;
        Self {
            intrinsics: Intrinsics {
                fx: k.fx * sx,
                fy: k.fy * sy,
                cx: k.cx * sx,
                cy: k.cy * sy,
            },
            width,
            height,
            ..self.clone()
        }
    }
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

/// Which part of the scene the rig observes. Front-facing rigs allow the
/// rear half of the xy and xz planes to be dropped at tokenization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RigFacing {
    #[default]
    All,
    Front,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    #[serde(default)]
    pub facing: RigFacing,
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>, facing: RigFacing) -> Self {
        Self { facing, cameras }
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn camera(&self, c: usize) -> Result<&Camera, GeometryError> {
        self.cameras.get(c).ok_or(GeometryError::UnknownCamera {
            index: c,
            count: self.cameras.len(),
        })
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        self.cameras.iter().enumerate().try_for_each(|(i, c)| c.validate(i))
    }

    pub fn project(&self, c: usize, x: [f64; 3]) -> Result<Projection, GeometryError> {
        Ok(self.camera(c)?.project(x))
    }

    /// Every camera resampled to `width x height`.
    pub fn rescaled(&self, width: usize, height: usize) -> Self {
        Self {
            facing: self.facing,
            cameras: self.cameras.iter().map(|c| c.rescaled(width, height)).collect(),
        }
    }

    /// First `n` cameras of a ring of `n` evenly spread headings around the
    /// ego vehicle, or a forward fan when `facing` is front.
    pub fn ring(n: usize, width: usize, height: usize, fov_x: f64, facing: RigFacing) -> Self {
        let fx = width as f64 / 2.0 / (fov_x / 2.0).tan();
        let k = Intrinsics {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        };
        let cameras = (0..n)
            .map(|i| {
                let yaw = match facing {
                    RigFacing::All => 2.0 * std::f64::consts::PI * i as f64 / n as f64,
                    RigFacing::Front if n > 1 => {
                        (i as f64 / (n - 1) as f64 - 0.5) * std::f64::consts::FRAC_PI_2
                    }
                    RigFacing::Front => 0.0,
                };
                Camera::look_from(&format!("cam{i}"), [0.0, 0.0, 1.5], yaw, 0.1, k, width, height)
            })
            .collect();
        Self { facing, cameras }
    }
}

/// Ego-frame rays through the centres of `pixels` (row, col) of camera `c`.
pub fn camera_rays(
    rig: &CameraRig,
    c: usize,
    pixels: &[(usize, usize)],
    t_near: f64,
    t_far: f64,
) -> Result<Vec<Ray>, GeometryError> {
    let cam = rig.camera(c)?;
    pixels
        .iter()
        .map(|&(row, col)| {
            if row >= cam.height || col >= cam.width {
                return Err(GeometryError::PixelOutOfBounds {
                    row,
                    col,
                    height: cam.height,
                    width: cam.width,
                });
            }
            Ok(cam.ray_through(col as f64 + 0.5, row as f64 + 0.5, t_near, t_far))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_camera() -> Camera {
        Camera {
            name: "id".into(),
            intrinsics: Intrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: 256.0,
                cy: 160.0,
            },
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            translation: [0.0; 3],
            width: 512,
            height: 320,
        }
    }

    #[test]
    fn on_axis_point() {
        let p = identity_camera().project([0.0, 0.0, 1.0]);
        assert_eq!((p.u, p.v, p.depth, p.visible), (256.0, 160.0, 1.0, true));
    }

    #[test]
    fn behind_camera_is_invisible() {
        assert!(!identity_camera().project([0.0, 0.0, -1.0]).visible);
        assert!(!identity_camera().project([100.0, 0.0, 1.0]).visible);
    }

    #[test]
    fn validation_catches_bad_intrinsics_and_rotation() {
        let mut cam = identity_camera();
        assert!(cam.validate(0).is_ok());
        cam.intrinsics.cx = 600.0;
        assert!(cam.validate(0).is_err());
        let mut cam = identity_camera();
        cam.rotation[0] = 1.1;
        assert!(matches!(cam.validate(3), Err(GeometryError::InvalidCamera { index: 3, .. })));
    }

    #[test]
    fn look_from_produces_orthonormal_pose() {
        let k = identity_camera().intrinsics;
        let cam = Camera::look_from("c", [1.0, 2.0, 1.5], 0.7, 0.2, k, 512, 320);
        cam.validate(0).unwrap();
        assert!((cam.center() - Vector3::new(1.0, 2.0, 1.5)).norm() < 1e-12);
        // A point straight ahead lands on the principal point.
        let ahead = cam.center() + Vector3::new(0.7f64.cos() * 0.2f64.cos(), 0.7f64.sin() * 0.2f64.cos(), -0.2f64.sin()) * 5.0;
        let p = cam.project([ahead.x, ahead.y, ahead.z]);
        assert!((p.u - 256.0).abs() < 1e-9 && (p.v - 160.0).abs() < 1e-9);
    }

    #[test]
    fn centre_pixel_looks_down_the_optical_axis() {
        let rig = CameraRig::new(vec![identity_camera()], RigFacing::Front);
        let rays = camera_rays(&rig, 0, &[(159, 255), (0, 0), (319, 511)], 0.2, 50.0).unwrap();
        let d = rays[0].direction;
        assert!((d - Vector3::new(-0.5 / 100.0, -0.5 / 100.0, 1.0).normalize()).norm() < 1e-12);
        for r in &rays {
            assert!((r.direction.norm() - 1.0).abs() < 1e-12);
        }
        assert!(camera_rays(&rig, 0, &[(320, 0)], 0.2, 50.0).is_err());
        assert!(camera_rays(&rig, 1, &[(0, 0)], 0.2, 50.0).is_err());
    }

    #[test]
    fn projection_back_projection_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let k = Intrinsics {
                fx: rng.random_range(50.0..400.0),
                fy: rng.random_range(50.0..400.0),
                cx: rng.random_range(100.0..400.0),
                cy: rng.random_range(50.0..250.0),
            };
            let cam = Camera::look_from(
                "r",
                [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..3.0)],
                rng.random_range(-3.0..3.0),
                rng.random_range(-0.5..0.5),
                k,
                512,
                320,
            );
            let x = cam.center()
                + cam.rotation_matrix().transpose()
                    * Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.5..60.0));
            let p = cam.project([x.x, x.y, x.z]);
            let ray = cam.ray_through(p.u, p.v, 0.0, 100.0);
            let t = (x - ray.origin).dot(&ray.direction);
            assert!((ray.at(t) - x).norm() < 1e-9);
            assert!((t - (x - ray.origin).norm()).abs() < 1e-9);
        }
    }
}
