//! Differentiable tensor ops.
//!
//! Broadcasting is limited to `add_bias` (trailing dimension); everything
//! else requires exact shape agreement or goes through `expand`.

use super::tensor::numel;
use super::{Result, Tensor, TensorError};
use crate::par;

const ROW_CHUNK: usize = 256;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Row-major GEMM `c (+)= op(a) * op(b)` where `op` is an optional transpose.
/// `a` is logically `m x k`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Strides of the logical (non-transposed) views.
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    par::for_each_chunk_mut(c, ROW_CHUNK * n, |ci, block| {
        let row0 = ci * ROW_CHUNK;
        let rows = block.len() / n;
        let a_off = row0 * rsa;
        // SAFETY: the strides describe in-bounds views of `a`, `b`, `block`
        // for `rows x k`, `k x n`, `rows x n` respectively.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(a_off),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

impl Tensor {
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: fn(f64, f64) -> f64,
    ) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        let y = out.clone();
        Tensor::from_op(op, out, self.shape(), vec![self.clone()], move |g, _| {
            let x = input.data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .zip(&y)
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect(),
            )]
        })
        .expect("unary op preserves shape")
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Tensor::from_op("add", out, self.shape(), vec![self.clone(), other.clone()], |g, _| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Tensor::from_op("sub", out, self.shape(), vec![self.clone(), other.clone()], |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op("mul", out, self.shape(), vec![self.clone(), other.clone()], move |g, needs| {
            let ga = needs[0].then(|| g.iter().zip(b.data()).map(|(g, b)| g * b).collect());
            let gb = needs[1].then(|| g.iter().zip(a.data()).map(|(g, a)| g * a).collect());
            vec![ga, gb]
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op("scale", out, self.shape(), vec![self.clone()], move |g, _| {
            vec![Some(g.iter().map(|v| v * c).collect())]
        })
        .expect("scale preserves shape")
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op("add_scalar", out, self.shape(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        })
        .expect("add_scalar preserves shape")
    }

    /// Adds `bias` (shape `[d]`) to every trailing-dimension row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let d = *self.shape().last().unwrap_or(&0);
        if bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let b = bias.data();
        let out = self
            .data()
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        Tensor::from_op("add_bias", out, self.shape(), vec![self.clone(), bias.clone()], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; d];
                for row in g.chunks(d.max(1)) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                acc
            });
            vec![Some(g.to_vec()), gb]
        })
    }

    /// Multiplies each trailing-dimension row by a constant weight.
    pub fn mask_rows(&self, weights: &[f64]) -> Result<Tensor> {
        let d = *self.shape().last().unwrap_or(&1);
        if d == 0 || self.numel() / d != weights.len() {
            return Err(TensorError::ShapeMismatch {
                op: "mask_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let w = weights.to_vec();
        let out = self
            .data()
            .chunks(d)
            .zip(&w)
            .flat_map(|(row, &m)| row.iter().map(move |x| x * m))
            .collect();
        Tensor::from_op("mask_rows", out, self.shape(), vec![self.clone()], move |g, _| {
            vec![Some(
                g.chunks(d)
                    .zip(&w)
                    .flat_map(|(row, &m)| row.iter().map(move |x| x * m))
                    .collect(),
            )]
        })
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let (&[m, k], &[k2, n]) = (self.shape(), other.shape()) else {
            return Err(mismatch());
        };
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), false, other.data(), false, &mut out, 0.0);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op("matmul", out, &[m, n], vec![self.clone(), other.clone()], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, b.data(), true, &mut ga, 0.0);
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g, false, &mut gb, 0.0);
                gb
            });
            vec![ga, gb]
        })
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(&self) -> Tensor {
        self.unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let d = match self.shape().last() {
            Some(&d) if d > 0 => d,
            _ => {
                return Err(TensorError::Invalid {
                    op: "softmax",
                    msg: format!("needs a non-empty last axis, got {:?}", self.shape()),
                })
            }
        };
        let mut out = self.to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let y = out.clone();
        Tensor::from_op("softmax", out, self.shape(), vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for ((gx, g), y) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                for i in 0..d {
                    gx[i] = y[i] * (g[i] - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum();
        Tensor::from_op("sum", vec![s], &[], vec![self.clone()], move |g, _| vec![Some(vec![g[0]; n])])
            .expect("scalar output")
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_along_axis(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::Invalid {
                op: "mean_along_axis",
                msg: format!("axis {axis} invalid for shape {shape:?}"),
            });
        }
        let outer: usize = numel(&shape[..axis]);
        let len = shape[axis];
        let inner: usize = numel(&shape[axis + 1..]);
        let n = len as f64;
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d /= n);
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Tensor::from_op("mean_along_axis", out, &out_shape, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for a in 0..len {
                    let dst = &mut gx[(o * len + a) * inner..(o * len + a + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d = s / n);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::from_op("reshape", self.to_vec(), shape, vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} invalid for rank {rank}"),
            });
        }
        for p in parts {
            let compatible = p.rank() == rank
                && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Tensor::from_op("concat", out, &shape, parts.to_vec(), move |g, needs| {
            let mut offset = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&w, &need)| {
                    let col = offset;
                    offset += w;
                    need.then(|| {
                        let mut gp = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * total + col..o * total + col + w]);
                        }
                        gp
                    })
                })
                .collect()
        })
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis] * inner;
        let (lo, w) = (start * inner, len * inner);
        let x = self.data();
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            out.extend_from_slice(&x[o * full + lo..o * full + lo + w]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Tensor::from_op("narrow", out, &out_shape, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; outer * full];
            for o in 0..outer {
                gx[o * full + lo..o * full + lo + w].copy_from_slice(&g[o * w..(o + 1) * w]);
            }
            vec![Some(gx)]
        })
    }

    /// Inserts a new axis of extent `n` at `axis` by repetition.
    pub fn expand(&self, axis: usize, n: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis > shape.len() {
            return Err(TensorError::Invalid {
                op: "expand",
                msg: format!("axis {axis} invalid for shape {shape:?}"),
            });
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis..]);
        let x = self.data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&x[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.insert(axis, n);
        Tensor::from_op("expand", out, &out_shape, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; outer * inner];
            for o in 0..outer {
                let dst = &mut gx[o * inner..(o + 1) * inner];
                for r in 0..n {
                    let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            vec![Some(gx)]
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
