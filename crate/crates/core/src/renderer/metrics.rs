//! PSNR and SSIM for images in `[0, 1]`.

use super::image::Image;
use super::RenderError;

pub const PSNR_CAP_DB: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check(a: &Image, b: &Image) -> Result<(), RenderError> {
    if a.shape() != b.shape() {
        return Err(RenderError::ShapeMismatch {
            what: "image",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, RenderError> {
    check(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)`, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, RenderError> {
    let m = mse(a, b)?;
    Ok(if m < 1e-10 { PSNR_CAP_DB } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB) })
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filter of an `h x w` channel plane.
fn filter(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..n).map(|j| k[j] * x[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over valid window positions and channels. Images smaller than
/// the 11x11 window use the largest odd window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, RenderError> {
    check(a, b)?;
    let (h, w, ch) = (a.height, a.width, a.channels);
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    if size == 0 {
        return Ok(1.0);
    }
    let k = gaussian_window(size);
    let plane = |img: &Image, c: usize| -> Vec<f64> { img.data.iter().skip(c).step_by(ch).copied().collect() };
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        let (x, y) = (plane(a, c), plane(b, c));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, _, _) = filter(&x, h, w, &k);
        let (my, _, _) = filter(&y, h, w, &k);
        let (sxx, _, _) = filter(&xx, h, w, &k);
        let (syy, _, _) = filter(&yy, h, w, &k);
        let (sxy, _, _) = filter(&xy, h, w, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
