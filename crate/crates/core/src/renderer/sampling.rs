//! Sample placement along rays.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Axis, GridWarp, Ray};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingSpace {
    MetricUniform,
    /// Equal steps of grid-space path length.
    #[default]
    WarpUniform,
}

/// Slab test against an axis-aligned box; returns the parameter interval
/// of the ray line inside the box.
pub fn ray_box_interval(ray: &Ray, lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        let (o, d) = (ray.origin[a], ray.direction[a]);
        if d.abs() < 1e-300 {
            if o < lo[a] || o > hi[a] {
                return None;
            }
            continue;
        }
        let (mut a0, mut a1) = ((lo[a] - o) / d, (hi[a] - o) / d);
        if a0 > a1 {
            std::mem::swap(&mut a0, &mut a1);
        }
        t0 = t0.max(a0);
        t1 = t1.min(a1);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Piecewise-linear map from ray distance to accumulated grid-space path
/// length, exact for the piecewise-linear warp.
struct PathLength {
    knots_t: Vec<f64>,
    knots_s: Vec<f64>,
}

impl PathLength {
    fn new(ray: &Ray, warp: &GridWarp, t0: f64, t1: f64) -> Self {
        let mut knots_t = vec![t0, t1];
        for a in Axis::ALL {
            let d = ray.direction[a.index()];
            if d.abs() < 1e-300 {
                continue;
            }
            for b in warp.axis(a).breakpoints() {
                let t = (b - ray.origin[a.index()]) / d;
                if t > t0 && t < t1 {
                    knots_t.push(t);
                }
            }
        }
        knots_t.sort_by(f64::total_cmp);
        let grid = |t: f64| {
            let p = ray.at(t);
            Axis::ALL.map(|a| warp.axis(a).ego_to_grid_unchecked(p[a.index()]))
        };
        let mut knots_s = Vec::with_capacity(knots_t.len());
        let mut s = 0.0;
        let mut prev = grid(t0);
        for &t in &knots_t {
            let g = grid(t);
            s += ((g[0] - prev[0]).powi(2) + (g[1] - prev[1]).powi(2) + (g[2] - prev[2]).powi(2)).sqrt();
            knots_s.push(s);
            prev = g;
        }
        Self { knots_t, knots_s }
    }

    fn total(&self) -> f64 {
        *self.knots_s.last().unwrap()
    }

    fn inverse(&self, s: f64) -> f64 {
        let k = self.knots_s.partition_point(|&v| v < s).clamp(1, self.knots_s.len() - 1);
        let (s0, s1) = (self.knots_s[k - 1], self.knots_s[k]);
        let (t0, t1) = (self.knots_t[k - 1], self.knots_t[k]);
        if s1 <= s0 {
            return t0;
        }
        t0 + (t1 - t0) * ((s - s0) / (s1 - s0)).clamp(0.0, 1.0)
    }
}

/// Bin edges `e_0 = t0 < ... < e_n = t1`.
pub fn bin_edges(ray: &Ray, warp: &GridWarp, space: SamplingSpace, n: usize, t0: f64, t1: f64) -> Vec<f64> {
    match space {
        SamplingSpace::MetricUniform => (0..=n).map(|j| t0 + (t1 - t0) * j as f64 / n as f64).collect(),
        SamplingSpace::WarpUniform => {
            let path = PathLength::new(ray, warp, t0, t1);
            let total = path.total();
            let mut e: Vec<f64> = (0..=n).map(|j| path.inverse(total * j as f64 / n as f64)).collect();
            e[0] = t0;
            e[n] = t1;
            e
        }
    }
}

/// One sample per bin (bin midpoint, or uniformly jittered) and the
/// intervals `delta_i = t_{i+1} - t_i`, the last one running to `t1`.
pub fn place_samples<R: Rng + ?Sized>(edges: &[f64], jitter: Option<&mut R>) -> (Vec<f64>, Vec<f64>) {
    let n = edges.len() - 1;
    let t: Vec<f64> = match jitter {
        Some(rng) => (0..n).map(|i| edges[i] + rng.random::<f64>() * (edges[i + 1] - edges[i])).collect(),
        None => (0..n).map(|i| 0.5 * (edges[i] + edges[i + 1])).collect(),
    };
    let delta = (0..n)
        .map(|i| if i + 1 < n { t[i + 1] - t[i] } else { edges[n] - t[i] })
        .collect();
    (t, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AxisWarp;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ray(o: [f64; 3], d: [f64; 3]) -> Ray {
        Ray {
            origin: Vector3::from(o),
            direction: Vector3::from(d).normalize(),
            t_near: 0.0,
            t_far: 1e9,
        }
    }

    #[test]
    fn box_interval() {
        let r = ray([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]);
        assert_eq!(ray_box_interval(&r, [-1.0; 3], [2.0; 3]), Some((-1.0, 2.0)));
        let r = ray([5.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        assert_eq!(ray_box_interval(&r, [-1.0; 3], [2.0; 3]), None);
    }

    #[test]
    fn warp_uniform_matches_cells_along_an_axis() {
        let warp = GridWarp {
            x: AxisWarp::symmetric(8, 2, 1.0, 3.0),
            y: AxisWarp::symmetric(8, 2, 1.0, 3.0),
            z: AxisWarp::one_sided(8, 4, 1.0, 3.0, -4.0),
        };
        // Along +x from the origin: 2 m of fine cells then 6 m of coarse ones.
        let r = ray([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]);
        let e = bin_edges(&r, &warp, SamplingSpace::WarpUniform, 4, 0.0, 8.0);
        let want = [0.0, 1.0, 2.0, 5.0, 8.0];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{e:?}");
        }
        let m = bin_edges(&r, &warp, SamplingSpace::MetricUniform, 4, 0.0, 8.0);
        assert_eq!(m, vec![0.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn edges_monotone_and_samples_inside_bins() {
        let warp = GridWarp::driving_default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let d = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let r = ray([0.0, 0.0, 1.5], d);
            let (_, t1) = ray_box_interval(&r, warp.metric_bounds().0, warp.metric_bounds().1).unwrap();
            let e = bin_edges(&r, &warp, SamplingSpace::WarpUniform, 32, 0.2, t1);
            assert!(e.windows(2).all(|w| w[1] >= w[0]));
            let (t, delta) = place_samples(&e, Some(&mut rng));
            for i in 0..32 {
                assert!(t[i] >= e[i] && t[i] <= e[i + 1]);
                assert!(delta[i] >= 0.0);
            }
            assert!((t[31] + delta[31] - t1).abs() < 1e-9);
        }
    }
}
