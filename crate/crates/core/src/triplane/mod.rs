//! Triplane storage, point queries and the colour/density decoder.
//!
//! A 3D point is warped into continuous grid indices, each of the three
//! planes is sampled bilinearly at the matching pair of indices, and the
//! three samples are multiplied elementwise.

mod decoder;
mod sample;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use decoder::{DecoderConfig, DecoderMlp};
pub use sample::{sample_plane, Bilinear, Taps};

use crate::geometry::{GridWarp, RigFacing};
use crate::ndtensor::{ParamStore, Tensor, TensorError};
use crate::par;

pub const PLANE_XY: &str = "plane.xy";
pub const PLANE_XZ: &str = "plane.xz";
pub const PLANE_YZ: &str = "plane.yz";

const POINT_CHUNK: usize = 8192;

#[derive(Debug, thiserror::Error)]
pub enum TriplaneError {
    #[error("plane {plane} has shape {got:?}, expected {want:?}")]
    PlaneShape {
        plane: &'static str,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("plane {plane} holds a non-finite feature at element {index}")]
    NonFinite { plane: &'static str, index: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How the three plane samples are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Product,
    /// Ablation only.
    Sum,
}

/// Three axis-aligned feature planes `P_xy [Sx, Sy, D]`, `P_xz [Sx, Sz, D]`,
/// `P_yz [Sy, Sz, D]` over a warped grid.
#[derive(Debug, Clone)]
pub struct Triplane {
    pub xy: Tensor,
    pub xz: Tensor,
    pub yz: Tensor,
    pub warp: GridWarp,
    pub facing: RigFacing,
}

/// Expected plane shapes for a grid and feature width.
pub fn plane_shapes(warp: &GridWarp, dim: usize) -> [[usize; 3]; 3] {
    let [sx, sy, sz] = warp.cells();
    [[sx, sy, dim], [sx, sz, dim], [sy, sz, dim]]
}

impl Triplane {
    pub fn new(xy: Tensor, xz: Tensor, yz: Tensor, warp: GridWarp, facing: RigFacing) -> Result<Self, TriplaneError> {
        let dim = *xy.shape().last().unwrap_or(&0);
        let want = plane_shapes(&warp, dim);
        for ((plane, t), w) in [("xy", &xy), ("xz", &xz), ("yz", &yz)].into_iter().zip(want) {
            if t.shape() != w {
                return Err(TriplaneError::PlaneShape {
                    plane,
                    got: t.shape().to_vec(),
                    want: w.to_vec(),
                });
            }
            if let Some(index) = t.data().iter().position(|v| !v.is_finite()) {
                return Err(TriplaneError::NonFinite { plane, index });
            }
        }
        Ok(Self { xy, xz, yz, warp, facing })
    }

    /// Planes filled with a constant.
    pub fn constant(warp: GridWarp, dim: usize, value: f64, facing: RigFacing) -> Self {
        let [a, b, c] = plane_shapes(&warp, dim);
        Self {
            xy: Tensor::full(&a, value),
            xz: Tensor::full(&b, value),
            yz: Tensor::full(&c, value),
            warp,
            facing,
        }
    }

    /// Trainable planes drawn from `N(mean, std)`.
    pub fn random<R: Rng>(warp: GridWarp, dim: usize, mean: f64, std: f64, facing: RigFacing, rng: &mut R) -> Self {
        let normal = Normal::new(mean, std).expect("valid std");
        let mut make = |shape: [usize; 3]| {
            let n = shape.iter().product();
            Tensor::param((0..n).map(|_| normal.sample(rng)).collect(), &shape).expect("shape")
        };
        let [a, b, c] = plane_shapes(&warp, dim);
        Self {
            xy: make(a),
            xz: make(b),
            yz: make(c),
            warp,
            facing,
        }
    }

    /// Reads `plane.*` entries from a parameter store.
    pub fn from_store(store: &ParamStore, warp: GridWarp, facing: RigFacing) -> Result<Self, TriplaneError> {
        Triplane::new(
            store.get(PLANE_XY)?.clone(),
            store.get(PLANE_XZ)?.clone(),
            store.get(PLANE_YZ)?.clone(),
            warp,
            facing,
        )
    }

    /// Writes the planes under their canonical names.
    pub fn write_to_store(&self, store: &mut ParamStore) -> Result<(), TensorError> {
        store.insert(PLANE_XY, self.xy.to_vec(), self.xy.shape())?;
        store.insert(PLANE_XZ, self.xz.to_vec(), self.xz.shape())?;
        store.insert(PLANE_YZ, self.yz.to_vec(), self.yz.shape())
    }

    pub fn feature_dim(&self) -> usize {
        self.xy.shape()[2]
    }

    pub fn planes(&self) -> [&Tensor; 3] {
        [&self.xy, &self.xz, &self.yz]
    }

    /// Detached copy with the same values.
    pub fn detach(&self) -> Self {
        Self {
            xy: self.xy.detach(),
            xz: self.xz.detach(),
            yz: self.yz.detach(),
            ..self.clone()
        }
    }

    /// Features for a batch of ego points as a `[B, D]` tensor, plus a
    /// per-point inside-extent mask (1 inside, 0 outside). Points outside
    /// the metric extent get zero features.
    pub fn query(&self, points: &[[f64; 3]], agg: Aggregation) -> Result<(Tensor, Vec<f64>), TensorError> {
        let idx: Vec<Option<[f64; 3]>> = points.iter().map(|&p| self.warp.ego_to_index(p)).collect();
        let mask = idx.iter().map(|i| if i.is_some() { 1.0 } else { 0.0 }).collect();
        Ok((self.query_indices(idx, agg)?, mask))
    }

    /// Single-point convenience wrapper around [`Triplane::query`]; `None`
    /// outside the metric extent.
    pub fn query_point(&self, x: [f64; 3]) -> Option<Vec<f64>> {
        let idx = self.warp.ego_to_index(x)?;
        let t = self.query_indices(vec![Some(idx)], Aggregation::Product).ok()?;
        Some(t.to_vec())
    }

    /// Differentiable triplane lookup at continuous plane indices.
    pub fn query_indices(&self, idx: Vec<Option<[f64; 3]>>, agg: Aggregation) -> Result<Tensor, TensorError> {
        let [sx, sy, sz] = self.warp.cells();
        let dim = self.feature_dim();
        let n = idx.len();
        let lookups: Vec<Option<[Bilinear; 3]>> = idx
            .iter()
            .map(|i| {
                i.map(|[x, y, z]| {
                    [
                        Bilinear::new(x, y, sx, sy),
                        Bilinear::new(x, z, sx, sz),
                        Bilinear::new(y, z, sy, sz),
                    ]
                })
            })
            .collect();
        let planes = [self.xy.clone(), self.xz.clone(), self.yz.clone()];
        // factors[p] holds the per-point sample of plane p, [B, D].
        let blocks = par::map_ranges(n, POINT_CHUNK, |range| {
            let mut f = [
                vec![0.0; range.len() * dim],
                vec![0.0; range.len() * dim],
                vec![0.0; range.len() * dim],
            ];
            for (r, i) in range.enumerate() {
                if let Some(lk) = &lookups[i] {
                    for p in 0..3 {
                        lk[p].gather(planes[p].data(), dim, &mut f[p][r * dim..(r + 1) * dim]);
                    }
                }
            }
            f
        });
        let mut factors = [
            Vec::with_capacity(n * dim),
            Vec::with_capacity(n * dim),
            Vec::with_capacity(n * dim),
        ];
        for b in blocks {
            for p in 0..3 {
                factors[p].extend_from_slice(&b[p]);
            }
        }
        let out: Vec<f64> = (0..n * dim)
            .map(|e| match agg {
                Aggregation::Product => factors[0][e] * factors[1][e] * factors[2][e],
                Aggregation::Sum => factors[0][e] + factors[1][e] + factors[2][e],
            })
            .collect();
        let sizes = planes.each_ref().map(Tensor::numel);
        Tensor::from_op("triplane_query", out, &[n, dim], planes.to_vec(), move |g, needs| {
            let total: usize = sizes.iter().sum();
            let offsets = [0, sizes[0], sizes[0] + sizes[1]];
            let acc = par::reduce_ranges(n, POINT_CHUNK, total, |range, acc| {
                let mut local = vec![0.0; dim];
                for i in range {
                    let Some(lk) = &lookups[i] else { continue };
                    let gi = &g[i * dim..(i + 1) * dim];
                    for p in 0..3 {
                        if !needs[p] {
                            continue;
                        }
                        match agg {
                            Aggregation::Product => {
                                let (a, b) = ((p + 1) % 3, (p + 2) % 3);
                                for e in 0..dim {
                                    local[e] = gi[e] * factors[a][i * dim + e] * factors[b][i * dim + e];
                                }
                            }
                            Aggregation::Sum => local.copy_from_slice(gi),
                        }
                        let dst = &mut acc[offsets[p]..offsets[p] + sizes[p]];
                        lk[p].scatter(&local, dim, dst);
                    }
                }
            });
            (0..3)
                .map(|p| needs[p].then(|| acc[offsets[p]..offsets[p] + sizes[p]].to_vec()))
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AxisWarp;
    use crate::ndtensor::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_warp() -> GridWarp {
        GridWarp {
            x: AxisWarp::symmetric(4, 1, 1.0, 2.0),
            y: AxisWarp::symmetric(6, 2, 0.5, 1.0),
            z: AxisWarp::one_sided(4, 3, 0.5, 1.0, -0.5),
        }
    }

    fn random_points(rng: &mut ChaCha8Rng, warp: &GridWarp, n: usize) -> Vec<[f64; 3]> {
        let (lo, hi) = warp.metric_bounds();
        (0..n)
            .map(|_| std::array::from_fn(|a| rng.random_range(lo[a]..hi[a])))
            .collect()
    }

    #[test]
    fn product_identity_and_absorbing_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let warp = small_warp();
        let mut t = Triplane::random(warp, 3, 0.0, 1.0, RigFacing::All, &mut rng);
        let pts = random_points(&mut rng, &warp, 20);
        t.xy = Tensor::full(t.xy.shape(), 1.0);
        let (f, _) = t.query(&pts, Aggregation::Product).unwrap();
        let zero_yz = Triplane { yz: Tensor::zeros(t.yz.shape()), ..t.clone() };
        let (z, _) = zero_yz.query(&pts, Aggregation::Product).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let idx = warp.ego_to_index(*p).unwrap();
            let a = sample_plane(t.xz.data(), 4, 4, 3, idx[0], idx[2]);
            let b = sample_plane(t.yz.data(), 6, 4, 3, idx[1], idx[2]);
            for e in 0..3 {
                assert!((f.data()[i * 3 + e] - a[e] * b[e]).abs() < 1e-14);
                assert_eq!(z.data()[i * 3 + e], 0.0);
            }
        }
    }

    #[test]
    fn scaling_one_plane_scales_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let warp = small_warp();
        let t = Triplane::random(warp, 2, 0.0, 1.0, RigFacing::All, &mut rng);
        let pts = random_points(&mut rng, &warp, 30);
        let scaled = Triplane { xy: t.xy.scale(2.5), ..t.clone() };
        let (a, _) = t.query(&pts, Aggregation::Product).unwrap();
        let (b, _) = scaled.query(&pts, Aggregation::Product).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.5 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn outside_extent_is_masked() {
        let t = Triplane::constant(small_warp(), 2, 1.0, RigFacing::All);
        let (f, mask) = t.query(&[[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]], Aggregation::Product).unwrap();
        assert_eq!(mask, vec![1.0, 0.0]);
        assert_eq!(&f.data()[2..], &[0.0, 0.0]);
        assert!(t.query_point([0.0, 0.0, -5.0]).is_none());
    }

    #[test]
    fn rejects_mismatched_planes() {
        let warp = small_warp();
        let bad = Triplane::new(Tensor::zeros(&[4, 6, 2]), Tensor::zeros(&[4, 4, 2]), Tensor::zeros(&[6, 3, 2]), warp, RigFacing::All);
        assert!(matches!(bad, Err(TriplaneError::PlaneShape { plane: "yz", .. })));
        let nan = Triplane::new(
            Tensor::new(vec![f64::NAN; 48], &[4, 6, 2]).unwrap(),
            Tensor::zeros(&[4, 4, 2]),
            Tensor::zeros(&[6, 4, 2]),
            warp,
            RigFacing::All,
        );
        assert!(matches!(nan, Err(TriplaneError::NonFinite { plane: "xy", index: 0 })));
    }

    #[test]
    fn query_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let warp = small_warp();
        let t = Triplane::random(warp, 3, 0.0, 1.0, RigFacing::All, &mut rng);
        let pts = random_points(&mut rng, &warp, 25);
        let w: Vec<f64> = (0..25 * 3).map(|i| (i as f64 * 0.7).sin()).collect();
        for agg in [Aggregation::Product, Aggregation::Sum] {
            let report = grad_check_many(
                |p| {
                    let tp = Triplane { xy: p[0].clone(), xz: p[1].clone(), yz: p[2].clone(), ..t.clone() };
                    let (f, _) = tp.query(&pts, agg)?;
                    f.mul(&Tensor::new(w.clone(), &[25, 3])?).map(|x| x.sum())
                },
                &[t.xy.clone(), t.xz.clone(), t.yz.clone()],
                1e-6,
                None,
            )
            .unwrap();
            assert!(report.max_rel_err <= 1e-5, "{agg:?}: {report:?}");
        }
    }

    #[test]
    fn directional_derivative_matches_along_a_path() {
        // The query is multilinear inside a cell: moving a point along x and
        // comparing against an analytic derivative of the bilinear form.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let warp = small_warp();
        let t = Triplane::random(warp, 2, 0.0, 1.0, RigFacing::All, &mut rng);
        let p = [0.3, 0.2, 0.1];
        let h = 1e-6;
        let f = |x: f64| t.query_point([x, p[1], p[2]]).unwrap();
        let (a, b, c) = (f(p[0] - h), f(p[0] + h), f(p[0]));
        let (a2, b2) = (f(p[0] - 2.0 * h), f(p[0] + 2.0 * h));
        for e in 0..2 {
            let d1 = (b[e] - a[e]) / (2.0 * h);
            let d2 = (b2[e] - a2[e]) / (4.0 * h);
            assert!((d1 - d2).abs() < 1e-6, "{d1} {d2} {}", c[e]);
        }
    }
}
