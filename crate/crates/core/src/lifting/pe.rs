//! Sinusoidal encoding of query-grid cell positions.

use crate::geometry::GridWarp;

/// Interleaved `(sin, cos)` pairs per axis. Each axis gets `dim / 3`
/// channels and `dim / 6` frequencies spaced geometrically from 1 down to
/// 1/10000. Positions are cell centres in grid units (the warped,
/// metre-free coordinate).
pub fn encode_position(coords: [f64; 3], dim: usize, out: &mut [f64]) {
    let per_axis = dim / 3;
    let nf = per_axis / 2;
    for (a, &x) in coords.iter().enumerate() {
        for k in 0..nf {
            let f = if nf > 1 { 10000f64.powf(-(k as f64) / (nf - 1) as f64) } else { 1.0 };
            let (s, c) = (x * f).sin_cos();
            out[a * per_axis + 2 * k] = s;
            out[a * per_axis + 2 * k + 1] = c;
        }
    }
}

/// `[S_x * S_y * S_z, dim]` encoding volume, cells in `(i, j, k)`
/// row-major order.
pub fn sinusoidal_pe(warp: &GridWarp, dim: usize) -> Vec<f64> {
    let [sx, sy, sz] = warp.cells();
    let mut out = vec![0.0; sx * sy * sz * dim];
    for i in 0..sx {
        for j in 0..sy {
            for k in 0..sz {
                let row = (i * sy + j) * sz + k;
                let c = [warp.x.cell_center(i), warp.y.cell_center(j), warp.z.cell_center(k)];
                encode_position(c, dim, &mut out[row * dim..(row + 1) * dim]);
            }
        }
    }
    out
}
