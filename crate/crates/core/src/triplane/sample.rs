//! Clamp-to-edge bilinear sampling on `[rows, cols, dim]` feature grids.
//!
//! Coordinates are continuous indices: integer values hit stored cells
//! exactly. Queries beyond the first/last cell read the edge cell and carry
//! zero positional derivative.

/// Linear interpolation taps along one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Taps {
    pub i0: usize,
    pub i1: usize,
    /// Weight of `i1`; `i0` gets `1 - frac`.
    pub frac: f64,
    /// `d frac / d coordinate`: 1 inside the grid, 0 where clamped.
    pub dfrac: f64,
}

impl Taps {
    pub fn new(x: f64, n: usize) -> Taps {
        if n <= 1 {
            return Taps { i0: 0, i1: 0, frac: 0.0, dfrac: 0.0 };
        }
        let max = (n - 1) as f64;
        if x <= 0.0 {
            Taps { i0: 0, i1: 1, frac: 0.0, dfrac: if x == 0.0 { 1.0 } else { 0.0 } }
        } else if x >= max {
            Taps { i0: n - 2, i1: n - 1, frac: 1.0, dfrac: 0.0 }
        } else {
            let i0 = (x.floor() as usize).min(n - 2);
            Taps { i0, i1: i0 + 1, frac: x - i0 as f64, dfrac: 1.0 }
        }
    }
}

/// The four weighted cells of a 2D bilinear lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bilinear {
    pub cells: [usize; 4],
    pub weights: [f64; 4],
    /// Derivatives of `weights` w.r.t. the row and column coordinates.
    pub d_row: [f64; 4],
    pub d_col: [f64; 4],
}

impl Bilinear {
    pub fn new(row: f64, col: f64, rows: usize, cols: usize) -> Bilinear {
        let r = Taps::new(row, rows);
        let c = Taps::new(col, cols);
        let (fr, fc) = (r.frac, c.frac);
        Bilinear {
            cells: [
                r.i0 * cols + c.i0,
                r.i0 * cols + c.i1,
                r.i1 * cols + c.i0,
                r.i1 * cols + c.i1,
            ],
            weights: [
                (1.0 - fr) * (1.0 - fc),
                (1.0 - fr) * fc,
                fr * (1.0 - fc),
                fr * fc,
            ],
            d_row: [
                -r.dfrac * (1.0 - fc),
                -r.dfrac * fc,
                r.dfrac * (1.0 - fc),
                r.dfrac * fc,
            ],
            d_col: [
                -(1.0 - fr) * c.dfrac,
                (1.0 - fr) * c.dfrac,
                -fr * c.dfrac,
                fr * c.dfrac,
            ],
        }
    }

    /// Accumulates the interpolated feature into `out`.
    pub fn gather(&self, grid: &[f64], dim: usize, out: &mut [f64]) {
        for (&cell, &w) in self.cells.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            let src = &grid[cell * dim..(cell + 1) * dim];
            out.iter_mut().zip(src).for_each(|(o, s)| *o += w * s);
        }
    }

    /// Adjoint of [`Bilinear::gather`]: spreads `g` back onto the grid.
    pub fn scatter(&self, g: &[f64], dim: usize, grid_grad: &mut [f64]) {
        for (&cell, &w) in self.cells.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            let dst = &mut grid_grad[cell * dim..(cell + 1) * dim];
            dst.iter_mut().zip(g).for_each(|(d, g)| *d += w * g);
        }
    }

    /// `(d/drow, d/dcol)` of `<g, sample>`.
    pub fn position_grad(&self, grid: &[f64], dim: usize, g: &[f64]) -> (f64, f64) {
        let (mut dr, mut dc) = (0.0, 0.0);
        for k in 0..4 {
            if self.d_row[k] == 0.0 && self.d_col[k] == 0.0 {
                continue;
            }
            let src = &grid[self.cells[k] * dim..(self.cells[k] + 1) * dim];
            let dot: f64 = src.iter().zip(g).map(|(s, g)| s * g).sum();
            dr += self.d_row[k] * dot;
            dc += self.d_col[k] * dot;
        }
        (dr, dc)
    }
}

/// Bilinear sample of a `[rows, cols, dim]` plane at continuous `(a, b)`.
pub fn sample_plane(plane: &[f64], rows: usize, cols: usize, dim: usize, a: f64, b: f64) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    Bilinear::new(a, b, rows, cols).gather(plane, dim, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_query_is_exact() {
        let plane: Vec<f64> = (0..3 * 4 * 2).map(|i| i as f64 * 0.37 - 1.0).collect();
        for r in 0..3 {
            for c in 0..4 {
                let got = sample_plane(&plane, 3, 4, 2, r as f64, c as f64);
                assert_eq!(got, plane[(r * 4 + c) * 2..(r * 4 + c + 1) * 2].to_vec());
            }
        }
    }

    #[test]
    fn midpoint_is_mean_of_four() {
        let plane = vec![1.0, 2.0, 4.0, 8.0];
        assert_eq!(sample_plane(&plane, 2, 2, 1, 0.5, 0.5), vec![3.75]);
    }

    #[test]
    fn clamps_to_edges() {
        let plane = vec![1.0, 2.0, 4.0, 8.0];
        assert_eq!(sample_plane(&plane, 2, 2, 1, -3.0, 7.0), vec![2.0]);
        let b = Bilinear::new(-3.0, 0.5, 2, 2);
        assert_eq!(b.d_row, [0.0; 4]);
    }

    #[test]
    fn single_cell_axis() {
        let plane = vec![5.0, 6.0];
        assert_eq!(sample_plane(&plane, 1, 2, 1, 0.3, 0.5), vec![5.5]);
    }
}
