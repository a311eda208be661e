use serde::{Deserialize, Serialize};

use super::GeometryError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WarpKind {
    /// Grid coordinates span `[-cells/2, cells/2]` with the inner band
    /// `[-inner_cells, inner_cells]` centred on the ego origin.
    #[default]
    Symmetric,
    /// Grid coordinates span `[0, cells]`; the inner band is
    /// `[0, inner_cells]` and grid 0 sits at `ego_min` metres.
    OneSided,
}

/// Piecewise-linear map between grid coordinates (cells) and ego metres for
/// one axis: fine resolution `r_inner` near the ego vehicle, coarse
/// `r_outer` beyond the inner band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisWarp {
    #[serde(default)]
    pub kind: WarpKind,
    pub cells: usize,
    pub inner_cells: usize,
    /// Metres per cell inside the inner band.
    pub r_inner: f64,
    /// Metres per cell outside the inner band.
    pub r_outer: f64,
    /// Ego position of grid coordinate 0 for one-sided axes.
    #[serde(default)]
    pub ego_min: f64,
    /// Expected far boundary in metres, checked by [`AxisWarp::validate`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<f64>,
}

impl AxisWarp {
    pub fn symmetric(cells: usize, inner_cells: usize, r_inner: f64, r_outer: f64) -> Self {
        Self {
            kind: WarpKind::Symmetric,
            cells,
            inner_cells,
            r_inner,
            r_outer,
            ego_min: 0.0,
            extent: None,
        }
    }

    pub fn one_sided(cells: usize, inner_cells: usize, r_inner: f64, r_outer: f64, ego_min: f64) -> Self {
        Self {
            kind: WarpKind::OneSided,
            cells,
            inner_cells,
            r_inner,
            r_outer,
            ego_min,
            extent: None,
        }
    }

    pub fn with_extent(mut self, extent: f64) -> Self {
        self.extent = Some(extent);
        self
    }

    pub fn validate(&self, axis: Axis) -> Result<(), GeometryError> {
        let bad = |reason: String| Err(GeometryError::InvalidWarp { axis, reason });
        if self.cells == 0 {
            return bad("cell count must be positive".into());
        }
        if !(self.r_inner > 0.0) || !(self.r_outer >= self.r_inner) {
            return bad(format!(
                "need 0 < r_inner <= r_outer, got {} and {}",
                self.r_inner, self.r_outer
            ));
        }
        match self.kind {
            WarpKind::Symmetric => {
                if self.cells % 2 != 0 || 2 * self.inner_cells > self.cells {
                    return bad(format!(
                        "symmetric axis needs even cells and inner_cells <= cells/2, got {} and {}",
                        self.cells, self.inner_cells
                    ));
                }
            }
            WarpKind::OneSided => {
                if self.inner_cells > self.cells {
                    return bad(format!(
                        "inner_cells {} exceeds cells {}",
                        self.inner_cells, self.cells
                    ));
                }
            }
        }
        if let Some(extent) = self.extent {
            let reach = self.metric_range().1;
            if (reach - extent).abs() > 1e-9 {
                return bad(format!(
                    "r_inner * inner + r_outer * outer reaches {reach} m, configured extent is {extent} m"
                ));
            }
        }
        Ok(())
    }

    /// Grid-coordinate range `[lo, hi]` covered by the axis.
    pub fn grid_range(&self) -> (f64, f64) {
        match self.kind {
            WarpKind::Symmetric => {
                let h = self.cells as f64 / 2.0;
                (-h, h)
            }
            WarpKind::OneSided => (0.0, self.cells as f64),
        }
    }

    fn inner_band(&self) -> (f64, f64) {
        let s = self.inner_cells as f64;
        match self.kind {
            WarpKind::Symmetric => (-s, s),
            WarpKind::OneSided => (0.0, s),
        }
    }

    fn origin(&self) -> f64 {
        match self.kind {
            WarpKind::Symmetric => 0.0,
            WarpKind::OneSided => self.ego_min,
        }
    }

    /// Three-branch map without range checks; the outer branches extend
    /// linearly past the grid.
    pub fn grid_to_ego_unchecked(&self, p: f64) -> f64 {
        let (lo, hi) = self.inner_band();
        let base = self.origin();
        if p < lo {
            base + self.r_outer * (p - lo) + self.r_inner * lo
        } else if p > hi {
            base + self.r_outer * (p - hi) + self.r_inner * hi
        } else {
            base + self.r_inner * p
        }
    }

    /// Exact inverse of [`AxisWarp::grid_to_ego_unchecked`].
    pub fn ego_to_grid_unchecked(&self, e: f64) -> f64 {
        let (lo, hi) = self.inner_band();
        let base = self.origin();
        let (e_lo, e_hi) = (base + self.r_inner * lo, base + self.r_inner * hi);
        if e < e_lo {
            lo + (e - e_lo) / self.r_outer
        } else if e > e_hi {
            hi + (e - e_hi) / self.r_outer
        } else {
            (e - base) / self.r_inner
        }
    }

    pub fn grid_to_ego(&self, axis: Axis, p: f64) -> Result<f64, GeometryError> {
        let (lo, hi) = self.grid_range();
        if !(lo..=hi).contains(&p) {
            return Err(GeometryError::OutOfRange { axis, value: p, lo, hi });
        }
        Ok(self.grid_to_ego_unchecked(p))
    }

    pub fn ego_to_grid(&self, axis: Axis, e: f64) -> Result<f64, GeometryError> {
        let (lo, hi) = self.metric_range();
        if !(lo..=hi).contains(&e) {
            return Err(GeometryError::OutOfRange { axis, value: e, lo, hi });
        }
        let (glo, ghi) = self.grid_range();
        Ok(self.ego_to_grid_unchecked(e).clamp(glo, ghi))
    }

    /// Metric range `[lo, hi]` in metres.
    pub fn metric_range(&self) -> (f64, f64) {
        let (lo, hi) = self.grid_range();
        (self.grid_to_ego_unchecked(lo), self.grid_to_ego_unchecked(hi))
    }

    /// Metric positions where the map changes slope.
    pub fn breakpoints(&self) -> [f64; 2] {
        let (lo, hi) = self.inner_band();
        let base = self.origin();
        [base + self.r_inner * lo, base + self.r_inner * hi]
    }

    /// Grid coordinate of the centre of cell `i`.
    pub fn cell_center(&self, i: usize) -> f64 {
        self.grid_range().0 + i as f64 + 0.5
    }

    /// Continuous plane index of a grid coordinate: integer values are cell
    /// centres.
    pub fn grid_to_index(&self, p: f64) -> f64 {
        p - self.grid_range().0 - 0.5
    }
}

/// Per-axis warps of a triplane grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridWarp {
    pub x: AxisWarp,
    pub y: AxisWarp,
    pub z: AxisWarp,
}

impl GridWarp {
    /// 96 x 96 x 48 cells covering +-180 m horizontally and -3..45 m
    /// vertically, with 36 inner cells per side on x/y and 36 inner cells on
    /// z from -3 m to 15 m.
    pub fn driving_default() -> Self {
        Self {
            x: AxisWarp::symmetric(96, 36, 1.0, 12.0).with_extent(180.0),
            y: AxisWarp::symmetric(96, 36, 1.0, 12.0).with_extent(180.0),
            z: AxisWarp::one_sided(48, 36, 0.5, 2.5, -3.0).with_extent(45.0),
        }
    }

    pub fn axis(&self, axis: Axis) -> &AxisWarp {
        match axis {
            Axis::X => &self.x,
            Axis::Y => &self.y,
            Axis::Z => &self.z,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        Axis::ALL.iter().try_for_each(|&a| self.axis(a).validate(a))
    }

    /// Cell counts `(S_x, S_y, S_z)`.
    pub fn cells(&self) -> [usize; 3] {
        [self.x.cells, self.y.cells, self.z.cells]
    }

    /// Metric bounding box `(min, max)`.
    pub fn metric_bounds(&self) -> ([f64; 3], [f64; 3]) {
        let r = Axis::ALL.map(|a| self.axis(a).metric_range());
        ([r[0].0, r[1].0, r[2].0], [r[0].1, r[1].1, r[2].1])
    }

    /// Ego-frame position of the centre of cell `(i, j, k)`.
    pub fn cell_center_ego(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.x.grid_to_ego_unchecked(self.x.cell_center(i)),
            self.y.grid_to_ego_unchecked(self.y.cell_center(j)),
            self.z.grid_to_ego_unchecked(self.z.cell_center(k)),
        ]
    }

    /// Continuous plane indices of an ego point, or `None` outside the
    /// metric extent.
    pub fn ego_to_index(&self, p: [f64; 3]) -> Option<[f64; 3]> {
        let mut out = [0.0; 3];
        for a in Axis::ALL {
            let w = self.axis(a);
            let g = w.ego_to_grid(a, p[a.index()]).ok()?;
            out[a.index()] = w.grid_to_index(g);
        }
        Some(out)
    }
}
