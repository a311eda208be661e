//! Triplane to token sequence: optional halfplane reduction, patchification
//! of each plane, a per-plane linear projection to `D_AR`, and
//! concatenation in `xy, xz, yz` order (row-major within a plane).

mod io;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

pub use io::{read_tokens, write_jsonl, write_tokens, TokenFileError, TOKEN_MAGIC, TOKEN_VERSION};

use crate::geometry::RigFacing;
use crate::ndtensor::{ParamStore, Tensor, TensorError};
use crate::triplane::Triplane;

/// Version of the token ordering recorded in token files.
pub const ORDERING_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TokenizeError {
    #[error("patch size {patch} does not divide {axis} extent {extent}")]
    Indivisible { axis: &'static str, extent: usize, patch: usize },
    #[error("tokenizer config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlaneId {
    Xy,
    Xz,
    Yz,
}

impl PlaneId {
    pub const ALL: [PlaneId; 3] = [PlaneId::Xy, PlaneId::Xz, PlaneId::Yz];

    pub fn name(self) -> &'static str {
        match self {
            PlaneId::Xy => "xy",
            PlaneId::Xz => "xz",
            PlaneId::Yz => "yz",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<PlaneId> {
        PlaneId::ALL.get(c as usize).copied()
    }

    /// Grid axes `(row, col)` of the plane: 0 = x, 1 = y, 2 = z.
    pub fn axes(self) -> (usize, usize) {
        match self {
            PlaneId::Xy => (0, 1),
            PlaneId::Xz => (0, 2),
            PlaneId::Yz => (1, 2),
        }
    }
}

/// Which half of the x axis survives halfplane reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeepHalf {
    /// `+x`, rows `S_x/2 .. S_x`.
    #[default]
    Front,
    Rear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub px: usize,
    pub py: usize,
    pub pz: usize,
    pub d_ar: usize,
    pub halfplane: bool,
    pub keep: KeepHalf,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            px: 4,
            py: 6,
            pz: 6,
            d_ar: 2048,
            halfplane: true,
            keep: KeepHalf::Front,
        }
    }
}

impl PatchConfig {
    pub fn patch(&self) -> [usize; 3] {
        [self.px, self.py, self.pz]
    }

    /// Checks the patch sizes against grid extents `[S_x, S_y, S_z]`.
    pub fn validate(&self, cells: [usize; 3]) -> Result<(), TokenizeError> {
        if self.d_ar == 0 {
            return Err(TokenizeError::Config("d_ar must be positive".into()));
        }
        let names = ["x", "y", "z"];
        for a in 0..3 {
            let p = self.patch()[a];
            let extent = cells[a];
            if p == 0 || extent % p != 0 {
                return Err(TokenizeError::Indivisible { axis: names[a], extent, patch: p });
            }
        }
        if self.halfplane && (cells[0] % 2 != 0 || (cells[0] / 2) % self.px != 0) {
            return Err(TokenizeError::Indivisible {
                axis: "x (half plane)",
                extent: cells[0] / 2,
                patch: self.px,
            });
        }
        Ok(())
    }

    /// Plane extents `(rows, cols)` that are patchified, plus the row offset
    /// (in cells) of the kept half within the full plane.
    pub fn plane_extent(&self, plane: PlaneId, cells: [usize; 3]) -> (usize, usize, usize) {
        let (a, b) = plane.axes();
        let (mut rows, cols) = (cells[a], cells[b]);
        let mut offset = 0;
        if self.halfplane && a == 0 {
            rows /= 2;
            if self.keep == KeepHalf::Front {
                offset = rows;
            }
        }
        (rows, cols, offset)
    }
}

/// Per-plane and total token counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TokenCounts {
    pub xy: usize,
    pub xz: usize,
    pub yz: usize,
    pub total: usize,
}

/// `L = L_xy + L_xz + L_yz`, `L_ij = S_i S_j / (p_i p_j)`, with the x extent
/// halved for xy and xz under halfplane reduction.
pub fn token_count(cells: [usize; 3], cfg: &PatchConfig) -> Result<TokenCounts, TokenizeError> {
    cfg.validate(cells)?;
    let p = cfg.patch();
    let per = PlaneId::ALL.map(|id| {
        let (rows, cols, _) = cfg.plane_extent(id, cells);
        let (a, b) = id.axes();
        (rows / p[a]) * (cols / p[b])
    });
    Ok(TokenCounts {
        xy: per[0],
        xz: per[1],
        yz: per[2],
        total: per.iter().sum(),
    })
}

/// Image-patch baseline: `N * F * ceil(H / patch) * ceil(W / patch)`.
/// `patch` must be positive.
pub fn baseline_token_count(height: usize, width: usize, patch: usize, cameras: usize, frames: usize) -> usize {
    assert!(patch > 0, "patch size must be positive");
    cameras * frames * height.div_ceil(patch) * width.div_ceil(patch)
}

/// Source index of every element of the patchified `[R/pi, C/pj, pi*pj*D]`
/// block of a `[rows_total, C, D]` plane, starting at row `row0`.
fn patch_indices(rows: usize, cols: usize, dim: usize, pi: usize, pj: usize, row0: usize) -> Vec<usize> {
    let (nr, nc) = (rows / pi, cols / pj);
    let mut idx = Vec::with_capacity(rows * cols * dim);
    for a in 0..nr {
        for b in 0..nc {
            for di in 0..pi {
                for dj in 0..pj {
                    let cell = (row0 + a * pi + di) * cols + b * pj + dj;
                    idx.extend(cell * dim..(cell + 1) * dim);
                }
            }
        }
    }
    idx
}

/// `[S_i, S_j, D]` to `[S_i/p_i, S_j/p_j, D p_i p_j]`; each patch vector is
/// laid out as `(di * p_j + dj) * D + d`.
pub fn patchify_plane(plane: &Tensor, pi: usize, pj: usize) -> Result<Tensor, TokenizeError> {
    let &[si, sj, d] = plane.shape() else {
        return Err(TokenizeError::Config(format!("plane must be [S_i, S_j, D], got {:?}", plane.shape())));
    };
    for (axis, extent, p) in [("row", si, pi), ("col", sj, pj)] {
        if p == 0 || extent % p != 0 {
            return Err(TokenizeError::Indivisible { axis, extent, patch: p });
        }
    }
    let idx = patch_indices(si, sj, d, pi, pj, 0);
    Ok(plane.take(Arc::new(idx), &[si / pi, sj / pj, d * pi * pj])?)
}

/// Inverse of [`patchify_plane`].
pub fn unpatchify_plane(patches: &Tensor, pi: usize, pj: usize) -> Result<Tensor, TokenizeError> {
    let &[nr, nc, pd] = patches.shape() else {
        return Err(TokenizeError::Config(format!("patches must be 3D, got {:?}", patches.shape())));
    };
    if pi == 0 || pj == 0 || pd % (pi * pj) != 0 {
        return Err(TokenizeError::Config(format!("patch dim {pd} is not a multiple of {pi}x{pj}")));
    }
    let d = pd / (pi * pj);
    let (si, sj) = (nr * pi, nc * pj);
    let fwd = patch_indices(si, sj, d, pi, pj, 0);
    let mut inv = vec![0; fwd.len()];
    for (e, &src) in fwd.iter().enumerate() {
        inv[src] = e;
    }
    Ok(patches.take(Arc::new(inv), &[si, sj, d])?)
}

/// Halfplane reduction: the kept x-half of P_xy and P_xz, P_yz unchanged.
pub fn halfplane_reduce(t: &Triplane, keep: KeepHalf) -> Result<[Tensor; 3], TokenizeError> {
    if t.facing != RigFacing::Front {
        return Err(TokenizeError::Config(
            "halfplane reduction needs a rig declared front-facing".into(),
        ));
    }
    let sx = t.xy.shape()[0];
    if sx % 2 != 0 {
        return Err(TokenizeError::Indivisible { axis: "x", extent: sx, patch: 2 });
    }
    let start = if keep == KeepHalf::Front { sx / 2 } else { 0 };
    Ok([t.xy.narrow(0, start, sx / 2)?, t.xz.narrow(0, start, sx / 2)?, t.yz.clone()])
}

/// Patch origin of a token, in patch units of the full (unreduced) plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub plane: PlaneId,
    pub row: u32,
    pub col: u32,
}

#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `[L, D_AR]`
    pub tokens: Tensor,
    pub provenance: Vec<Provenance>,
    pub config: PatchConfig,
    pub ordering_version: u32,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

/// Per-plane linear maps `D_f p_i p_j -> D_AR`.
#[derive(Debug, Clone)]
pub struct TokenProjection {
    pub weights: [(Tensor, Tensor); 3],
}

fn proj_name(p: PlaneId) -> (String, String) {
    (format!("tokenizer.{}.weight", p.name()), format!("tokenizer.{}.bias", p.name()))
}

fn patch_dim(p: PlaneId, cfg: &PatchConfig, feature_dim: usize) -> usize {
    let (a, b) = p.axes();
    feature_dim * cfg.patch()[a] * cfg.patch()[b]
}

impl TokenProjection {
    /// Makes sure `store` holds projections matching `cfg`, initialising any
    /// that are missing or shaped for another patch config. Returns the
    /// names that were (re)initialised.
    pub fn ensure<R: Rng>(store: &mut ParamStore, cfg: &PatchConfig, feature_dim: usize, rng: &mut R) -> Result<Vec<String>, TokenizeError> {
        let mut fresh = Vec::new();
        for p in PlaneId::ALL {
            let (wn, bn) = proj_name(p);
            let din = patch_dim(p, cfg, feature_dim);
            let ok = store.get(&wn).is_ok_and(|w| w.shape() == [din, cfg.d_ar])
                && store.get(&bn).is_ok_and(|b| b.shape() == [cfg.d_ar]);
            if ok {
                continue;
            }
            let bound = (6.0 / (din + cfg.d_ar) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("bound");
            store.insert(&wn, (0..din * cfg.d_ar).map(|_| dist.sample(rng)).collect(), &[din, cfg.d_ar])?;
            store.insert(&bn, vec![0.0; cfg.d_ar], &[cfg.d_ar])?;
            fresh.push(wn);
            fresh.push(bn);
        }
        Ok(fresh)
    }

    pub fn from_store(store: &ParamStore) -> Result<Self, TokenizeError> {
        let get = |p: PlaneId| -> Result<(Tensor, Tensor), TokenizeError> {
            let (wn, bn) = proj_name(p);
            Ok((store.get(&wn)?.clone(), store.get(&bn)?.clone()))
        };
        Ok(Self {
            weights: [get(PlaneId::Xy)?, get(PlaneId::Xz)?, get(PlaneId::Yz)?],
        })
    }
}

/// Affine map applied to every patch: `[n_r, n_c, P] -> [n_r * n_c, D_AR]`.
pub fn project_tokens(patches: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, TokenizeError> {
    let &[nr, nc, pd] = patches.shape() else {
        return Err(TokenizeError::Config(format!("patches must be 3D, got {:?}", patches.shape())));
    };
    Ok(patches.reshape(&[nr * nc, pd])?.matmul(weight)?.add_bias(bias)?)
}

pub fn tokenize(t: &Triplane, cfg: &PatchConfig, proj: &TokenProjection) -> Result<TokenSequence, TokenizeError> {
    let cells = t.warp.cells();
    cfg.validate(cells)?;
    let planes = if cfg.halfplane {
        halfplane_reduce(t, cfg.keep)?
    } else {
        [t.xy.clone(), t.xz.clone(), t.yz.clone()]
    };
    let p = cfg.patch();
    let mut blocks = Vec::with_capacity(3);
    let mut provenance = Vec::new();
    for (k, id) in PlaneId::ALL.into_iter().enumerate() {
        let (a, b) = id.axes();
        let (_, _, offset) = cfg.plane_extent(id, cells);
        let patches = patchify_plane(&planes[k], p[a], p[b])?;
        let (nr, nc) = (patches.shape()[0], patches.shape()[1]);
        let (w, bias) = &proj.weights[k];
        blocks.push(project_tokens(&patches, w, bias)?);
        let row0 = offset / p[a];
        for r in 0..nr {
            for c in 0..nc {
                provenance.push(Provenance {
                    plane: id,
                    row: (row0 + r) as u32,
                    col: c as u32,
                });
            }
        }
    }
    Ok(TokenSequence {
        tokens: Tensor::concat(&blocks, 0)?,
        provenance,
        config: *cfg,
        ordering_version: ORDERING_VERSION,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AxisWarp, GridWarp};
    use crate::ndtensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(px: usize, py: usize, pz: usize, halfplane: bool) -> PatchConfig {
        PatchConfig { px, py, pz, d_ar: 8, halfplane, keep: KeepHalf::Front }
    }

    #[test]
    fn driving_counts() {
        let s = [96, 96, 48];
        let c = token_count(s, &cfg(4, 6, 6, false)).unwrap();
        assert_eq!((c.xy, c.xz, c.yz, c.total), (384, 192, 128, 704));
        assert_eq!(token_count(s, &cfg(4, 6, 6, true)).unwrap().total, 416);
        let c = token_count(s, &cfg(8, 8, 8, false)).unwrap();
        assert_eq!((c.xy, c.xz, c.yz, c.total), (144, 72, 72, 288));
        assert_eq!(token_count(s, &cfg(8, 8, 8, true)).unwrap().total, 180);
    }

    #[test]
    fn baseline_counts() {
        assert_eq!(baseline_token_count(320, 512, 32, 1, 1), 160);
        assert_eq!(baseline_token_count(320, 512, 32, 4, 6), 3840);
        assert_eq!(baseline_token_count(7, 7, 7, 1, 1), 1);
        assert_eq!(baseline_token_count(33, 33, 32, 1, 1), 4);
    }

    #[test]
    fn indivisible_names_the_axis() {
        let e = token_count([96, 96, 48], &cfg(5, 6, 6, false)).unwrap_err();
        assert!(e.to_string().contains("x extent 96"), "{e}");
        let e = token_count([96, 96, 48], &cfg(4, 6, 7, false)).unwrap_err();
        assert!(matches!(e, TokenizeError::Indivisible { axis: "z", .. }));
        assert!(token_count([12, 96, 48], &cfg(4, 6, 6, true)).is_err());
    }

    #[test]
    fn unit_patches_are_a_reshape() {
        let plane = Tensor::new((0..24).map(f64::from).collect(), &[2, 3, 4]).unwrap();
        let p = patchify_plane(&plane, 1, 1).unwrap();
        assert_eq!(p.data(), plane.data());
        assert_eq!(p.shape(), &[2, 3, 4]);
    }

    #[test]
    fn patch_layout() {
        // 4x4 plane with D = 1, patches 2x2: patch (0, 1) holds cells (0,2),(0,3),(1,2),(1,3).
        let plane = Tensor::new((0..16).map(f64::from).collect(), &[4, 4, 1]).unwrap();
        let p = patchify_plane(&plane, 2, 2).unwrap();
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn projection_identity_and_bias_only() {
        let patches = Tensor::new((0..2 * 3 * 4).map(|i| i as f64 * 0.5).collect(), &[2, 3, 4]).unwrap();
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let w = Tensor::new(eye, &[4, 4]).unwrap();
        let out = project_tokens(&patches, &w, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(out.data(), patches.data());
        let b = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[4]).unwrap();
        let out = project_tokens(&Tensor::zeros(&[2, 3, 4]), &w, &b).unwrap();
        assert!(out.data().chunks(4).all(|r| r == [1.0, 2.0, 3.0, 4.0]));
    }

    fn small_triplane(facing: RigFacing, dim: usize) -> Triplane {
        let warp = GridWarp {
            x: AxisWarp::symmetric(8, 2, 1.0, 2.0),
            y: AxisWarp::symmetric(6, 2, 1.0, 2.0),
            z: AxisWarp::one_sided(4, 2, 1.0, 2.0, -1.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Triplane::random(warp, dim, 0.0, 1.0, facing, &mut rng)
    }

    #[test]
    fn tokenize_counts_order_and_provenance() {
        let t = small_triplane(RigFacing::Front, 2);
        let c = cfg(2, 3, 2, true);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        TokenProjection::ensure(&mut store, &c, 2, &mut rng).unwrap();
        let seq = tokenize(&t, &c, &TokenProjection::from_store(&store).unwrap()).unwrap();
        let counts = token_count([8, 6, 4], &c).unwrap();
        assert_eq!(seq.len(), counts.total);
        assert_eq!(seq.tokens.shape(), &[counts.total, 8]);
        assert_eq!(seq.provenance[0], Provenance { plane: PlaneId::Xy, row: 2, col: 0 });
        assert_eq!(seq.provenance[counts.xy].plane, PlaneId::Xz);
        assert!(seq.provenance.windows(2).all(|w| w[0].plane.code() <= w[1].plane.code()));
        let unique: std::collections::HashSet<_> = seq.provenance.iter().collect();
        assert_eq!(unique.len(), seq.len());
        let err = tokenize(&small_triplane(RigFacing::All, 2), &c, &TokenProjection::from_store(&store).unwrap());
        assert!(matches!(err, Err(TokenizeError::Config(_))));
    }

    #[test]
    fn changing_patch_config_only_reinitialises_projection() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = cfg(2, 3, 2, false);
        assert_eq!(TokenProjection::ensure(&mut store, &a, 2, &mut rng).unwrap().len(), 6);
        assert!(TokenProjection::ensure(&mut store, &a, 2, &mut rng).unwrap().is_empty());
        let b = cfg(4, 3, 4, false);
        let fresh = TokenProjection::ensure(&mut store, &b, 2, &mut rng).unwrap();
        assert_eq!(fresh, ["tokenizer.xy.weight", "tokenizer.xy.bias", "tokenizer.xz.weight", "tokenizer.xz.bias", "tokenizer.yz.weight", "tokenizer.yz.bias"]);
        let t = small_triplane(RigFacing::All, 2);
        let seq = tokenize(&t, &b, &TokenProjection::from_store(&store).unwrap()).unwrap();
        assert_eq!(seq.len(), token_count([8, 6, 4], &b).unwrap().total);
    }

    #[test]
    fn projection_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let patches = Tensor::new((0..2 * 2 * 6).map(|_| rng.random_range(-1.0..1.0)).collect(), &[2, 2, 6]).unwrap();
        let w = Tensor::param((0..6 * 3).map(|_| rng.random_range(-1.0..1.0)).collect(), &[6, 3]).unwrap();
        let b = Tensor::new(vec![0.1, 0.2, 0.3], &[3]).unwrap();
        let err = grad_check(|w| Ok(project_tokens(&patches, w, &b).unwrap().square().sum()), &w, 1e-6).unwrap();
        assert!(err < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_is_bit_exact(pi in 1usize..4, pj in 1usize..4, nr in 1usize..4, nc in 1usize..4, d in 1usize..4, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [nr * pi, nc * pj, d];
            let plane = Tensor::new((0..shape.iter().product()).map(|_| rng.random::<f64>()).collect(), &shape).unwrap();
            let p = patchify_plane(&plane, pi, pj).unwrap();
            prop_assert_eq!(p.shape(), &[nr, nc, d * pi * pj]);
            let back = unpatchify_plane(&p, pi, pj).unwrap();
            prop_assert_eq!(back.data(), plane.data());
        }

        #[test]
        fn count_law_matches_tokenize(px in 1usize..4, py in 1usize..4, pz in 1usize..4, mx in 1usize..3, my in 1usize..3, mz in 1usize..3, half in any::<bool>()) {
            let cells = [2 * px * mx, py * my, pz * mz];
            let c = PatchConfig { px, py, pz, d_ar: 2, halfplane: half, keep: KeepHalf::Front };
            let warp = GridWarp {
                x: AxisWarp::symmetric(cells[0], cells[0] / 2, 1.0, 1.0),
                y: AxisWarp::symmetric(cells[1], 0, 1.0, 1.0),
                z: AxisWarp::one_sided(cells[2], 0, 1.0, 1.0, 0.0),
            };
            let t = Triplane::constant(warp, 1, 0.5, RigFacing::Front);
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            TokenProjection::ensure(&mut store, &c, 1, &mut rng).unwrap();
            let seq = tokenize(&t, &c, &TokenProjection::from_store(&store).unwrap()).unwrap();
            let hx = if half { cells[0] / 2 } else { cells[0] };
            let want = hx * cells[1] / (px * py) + hx * cells[2] / (px * pz) + cells[1] * cells[2] / (py * pz);
            prop_assert_eq!(seq.len(), want);
            prop_assert_eq!(token_count(cells, &c).unwrap().total, want);
        }
    }
}
