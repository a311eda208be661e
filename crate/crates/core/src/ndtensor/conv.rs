use super::{Result, Tensor, TensorError};
use crate::par;

/// Geometry of a square-kernel 2D convolution over HWC images with
/// clamp-to-edge padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = |n: usize| (n + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (span(h), span(w))
    }
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

impl Tensor {
    /// Unfolds `[H, W, C]` into `[Ho * Wo, k * k * C]` patches. Out-of-image
    /// taps replicate the nearest edge pixel, so a constant image stays
    /// constant through any conv stack.
    pub fn im2col(&self, spec: Conv2dSpec) -> Result<Tensor> {
        let &[h, w, c] = self.shape() else {
            return Err(TensorError::Invalid {
                op: "im2col",
                msg: format!("expected [H, W, C], got {:?}", self.shape()),
            });
        };
        if h == 0 || w == 0 || spec.stride == 0 || spec.kernel == 0 {
            return Err(TensorError::Invalid {
                op: "im2col",
                msg: format!("degenerate input {:?} or spec {spec:?}", self.shape()),
            });
        }
        let (ho, wo) = spec.output_size(h, w);
        let k = spec.kernel;
        let cols = k * k * c;
        // Source pixel for every (output position, tap).
        let taps: Vec<usize> = (0..ho * wo)
            .flat_map(|o| {
                let (oy, ox) = (o / wo, o % wo);
                (0..k * k).map(move |t| {
                    let (ky, kx) = (t / k, t % k);
                    let y = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    let x = (ox * spec.stride + kx) as isize - spec.padding as isize;
                    clamp_index(y, h) * w + clamp_index(x, w)
                })
            })
            .collect();
        let x = self.data();
        let mut out = vec![0.0; ho * wo * cols];
        par::for_each_chunk_mut(&mut out, cols * 64, |ci, block| {
            for (r, row) in block.chunks_mut(cols).enumerate() {
                let o = ci * 64 + r;
                for t in 0..k * k {
                    let src = taps[o * k * k + t] * c;
                    row[t * c..(t + 1) * c].copy_from_slice(&x[src..src + c]);
                }
            }
        });
        let n_in = h * w * c;
        Tensor::from_op("im2col", out, &[ho * wo, cols], vec![self.clone()], move |g, _| {
            let gx = par::reduce_ranges(ho * wo, 256, n_in, |range, acc| {
                for o in range {
                    for t in 0..k * k {
                        let dst = taps[o * k * k + t] * c;
                        let src = &g[o * cols + t * c..o * cols + (t + 1) * c];
                        acc[dst..dst + c].iter_mut().zip(src).for_each(|(a, s)| *a += s);
                    }
                }
            });
            vec![Some(gx)]
        })
    }

    /// 2D convolution of `[H, W, Cin]` with weights `[k * k * Cin, Cout]` and
    /// bias `[Cout]`, producing `[Ho, Wo, Cout]`.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
        let cols = self.im2col(spec)?;
        let (ho, wo) = spec.output_size(self.shape()[0], self.shape()[1]);
        let cout = *weight.shape().last().unwrap_or(&0);
        cols.matmul(weight)
            .map_err(|_| TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            })?
            .add_bias(bias)?
            .reshape(&[ho, wo, cout])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::grad_check;

    const SPEC: Conv2dSpec = Conv2dSpec {
        kernel: 3,
        stride: 2,
        padding: 1,
    };

    #[test]
    fn output_size_halves() {
        assert_eq!(SPEC.output_size(64, 96), (32, 48));
        assert_eq!(SPEC.output_size(1, 3), (1, 2));
    }

    #[test]
    fn naive_convolution_oracle() {
        let (h, w, cin, cout) = (5, 6, 2, 3);
        let x: Vec<f64> = (0..h * w * cin).map(|i| ((i * 7) % 11) as f64 * 0.1 - 0.4).collect();
        let wt: Vec<f64> = (0..9 * cin * cout).map(|i| ((i * 5) % 13) as f64 * 0.05 - 0.3).collect();
        let b = vec![0.1, -0.2, 0.3];
        let img = Tensor::new(x.clone(), &[h, w, cin]).unwrap();
        let out = img
            .conv2d(
                &Tensor::new(wt.clone(), &[9 * cin, cout]).unwrap(),
                &Tensor::new(b.clone(), &[cout]).unwrap(),
                SPEC,
            )
            .unwrap();
        let (ho, wo) = SPEC.output_size(h, w);
        assert_eq!(out.shape(), &[ho, wo, cout]);
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = b[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let y = clamp_index((oy * 2 + ky) as isize - 1, h);
                            let xx = clamp_index((ox * 2 + kx) as isize - 1, w);
                            for ci in 0..cin {
                                acc += x[(y * w + xx) * cin + ci]
                                    * wt[((ky * 3 + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    let got = out.data()[(oy * wo + ox) * cout + co];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let x = Tensor::new((0..4 * 6 * 2).map(|i| (i as f64 * 0.37).sin()).collect(), &[4, 6, 2]).unwrap();
        let wt = Tensor::new((0..18 * 3).map(|i| (i as f64 * 0.21).cos() * 0.3).collect(), &[18, 3]).unwrap();
        let b = Tensor::new(vec![0.1, 0.0, -0.1], &[3]).unwrap();
        let probe = |y: Tensor| -> Result<Tensor> {
            let n = y.numel();
            let w = Tensor::new((0..n).map(|i| (i as f64 * 0.13).sin()).collect(), y.shape())?;
            Ok(y.mul(&w)?.sum())
        };
        let (w1, b1) = (wt.clone(), b.clone());
        let ex = grad_check(|t| probe(t.conv2d(&w1, &b1, SPEC)?), &x, 1e-6).unwrap();
        let (x2, b2) = (x.clone(), b.clone());
        let ew = grad_check(|t| probe(x2.conv2d(t, &b2, SPEC)?), &wt, 1e-6).unwrap();
        assert!(ex < 1e-7 && ew < 1e-7, "{ex} {ew}");
    }
}
