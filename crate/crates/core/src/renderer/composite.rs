//! Alpha compositing along rays as a single differentiable op.

use std::sync::Arc;

use crate::ndtensor::{Result, Tensor, TensorError};
use crate::par;

/// Lower bound on accumulated weight when normalising expected depth.
pub const DEPTH_EPS: f64 = 1e-10;

const RAY_CHUNK: usize = 512;

/// Per-sample quadrature weights of one ray and the residual transmittance.
pub fn ray_weights(sigma: &[f64], delta: &[f64]) -> (Vec<f64>, f64) {
    let mut t = 1.0;
    let w = sigma
        .iter()
        .zip(delta)
        .map(|(&s, &d)| {
            let tau = s * d;
            let w = t * -(-tau).exp_m1();
            t *= (-tau).exp();
            w
        })
        .collect();
    (w, t)
}

/// Composites `n` samples per ray. `rgb` is `[R*n, 3]`, `sigma` is
/// `[R*n, 1]`; `t` and `delta` hold sample distances and interval lengths.
/// Returns `[R, 5]`: colour over `background`, expected depth, opacity.
pub fn composite(
    rgb: &Tensor,
    sigma: &Tensor,
    t: Arc<Vec<f64>>,
    delta: Arc<Vec<f64>>,
    n: usize,
    background: [f64; 3],
) -> Result<Tensor> {
    let total = sigma.numel();
    if n == 0 || total % n != 0 || rgb.shape() != [total, 3] || t.len() != total || delta.len() != total {
        return Err(TensorError::Invalid {
            op: "composite",
            msg: format!(
                "rgb {:?}, sigma {:?}, {} distances, {} intervals, {n} samples per ray",
                rgb.shape(),
                sigma.shape(),
                t.len(),
                delta.len()
            ),
        });
    }
    let rays = total / n;
    let out: Vec<f64> = par::map_ranges(rays, RAY_CHUNK, |range| {
        let mut out = Vec::with_capacity(range.len() * 5);
        for r in range {
            let s = r * n..(r + 1) * n;
            let (w, t_res) = ray_weights(&sigma.data()[s.clone()], &delta[s.clone()]);
            let c = &rgb.data()[s.start * 3..s.end * 3];
            let mut col = background.map(|b| b * t_res);
            for (i, wi) in w.iter().enumerate() {
                for k in 0..3 {
                    col[k] += wi * c[i * 3 + k];
                }
            }
            let acc: f64 = w.iter().sum();
            let wt: f64 = w.iter().zip(&t[s]).map(|(w, t)| w * t).sum();
            out.extend_from_slice(&col);
            out.push(wt / acc.max(DEPTH_EPS));
            out.push(acc);
        }
        out
    })
    .concat();
    let (rgb_in, sigma_in) = (rgb.clone(), sigma.clone());
    let fwd = out.clone();
    Tensor::from_op("composite", out, &[rays, 5], vec![rgb.clone(), sigma.clone()], move |g, needs| {
        let parts = par::map_ranges(rays, RAY_CHUNK, |range| {
            let mut d_rgb = Vec::with_capacity(range.len() * n * 3);
            let mut d_sigma = Vec::with_capacity(range.len() * n);
            let mut big_g = vec![0.0; n];
            for r in range {
                let s = r * n..(r + 1) * n;
                let sig = &sigma_in.data()[s.clone()];
                let del = &delta[s.clone()];
                let ts = &t[s.clone()];
                let c = &rgb_in.data()[s.start * 3..s.end * 3];
                let (w, t_res) = ray_weights(sig, del);
                let gr = &g[r * 5..r * 5 + 5];
                let acc = fwd[r * 5 + 4];
                let depth = fwd[r * 5 + 3];
                let norm = acc.max(DEPTH_EPS);
                let centre = if acc > DEPTH_EPS { depth } else { 0.0 };
                for i in 0..n {
                    let gc: f64 = (0..3).map(|k| gr[k] * c[i * 3 + k]).sum();
                    big_g[i] = gc + gr[4] + gr[3] * (ts[i] - centre) / norm;
                }
                let g_res: f64 = (0..3).map(|k| gr[k] * background[k]).sum();
                if needs[0] {
                    for i in 0..n {
                        d_rgb.extend((0..3).map(|k| w[i] * gr[k]));
                    }
                }
                if needs[1] {
                    // Transmittance after sample i, and the tail sum of w_k G_k.
                    let mut tail: f64 = 0.0;
                    let mut ds = vec![0.0; n];
                    let mut t_after = t_res;
                    for i in (0..n).rev() {
                        ds[i] = del[i] * (t_after * big_g[i] - tail - t_res * g_res);
                        tail += w[i] * big_g[i];
                        t_after += w[i];
                    }
                    d_sigma.extend(ds);
                }
            }
            (d_rgb, d_sigma)
        });
        let (mut d_rgb, mut d_sigma) = (Vec::new(), Vec::new());
        for (a, b) in parts {
            d_rgb.extend(a);
            d_sigma.extend(b);
        }
        vec![needs[0].then_some(d_rgb), needs[1].then_some(d_sigma)]
    })
}
