//! Fixed sparse linear maps applied to flattened tensors.

use std::sync::Arc;

use super::{Result, Tensor, TensorError};

/// CSR matrix `y = A x` with `x` and `y` flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMap {
    /// Builds the map from `(row, col, value)` entries; duplicates add up.
    pub fn from_triplets(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> SparseMap {
        entries.sort_by_key(|e| (e.0, e.1));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last = None;
        for (r, c, v) in entries {
            assert!(r < rows && c < cols, "entry ({r}, {c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        SparseMap { rows, cols, indptr, indices, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                (self.indptr[r]..self.indptr[r + 1])
                    .map(|k| self.values[k] * x[self.indices[k]])
                    .sum()
            })
            .collect()
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.cols];
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                x[self.indices[k]] += self.values[k] * y[r];
            }
        }
        x
    }
}

impl Tensor {
    /// Applies `map` to the flattened tensor and reshapes to `shape`.
    pub fn apply_sparse(&self, map: &Arc<SparseMap>, shape: &[usize]) -> Result<Tensor> {
        if self.numel() != map.cols() || shape.iter().product::<usize>() != map.rows() {
            return Err(TensorError::Invalid {
                op: "apply_sparse",
                msg: format!(
                    "map is {}x{}, input {:?}, output {:?}",
                    map.rows(),
                    map.cols(),
                    self.shape(),
                    shape
                ),
            });
        }
        let m = map.clone();
        Tensor::from_op("apply_sparse", map.apply(self.data()), shape, vec![self.clone()], move |g, _| {
            vec![Some(m.apply_transpose(g))]
        })
    }
}

impl Tensor {
    /// `out[e] = self[idx[e]]` over flattened data; the backward pass
    /// scatter-adds, so repeated indices are allowed.
    pub fn take(&self, idx: Arc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        let n = self.numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::Invalid {
                op: "take",
                msg: format!("index {bad} out of range for {:?}", self.shape()),
            });
        }
        let out = idx.iter().map(|&i| self.data()[i]).collect();
        Tensor::from_op("take", out, shape, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; n];
            for (&i, g) in idx.iter().zip(g) {
                gx[i] += g;
            }
            vec![Some(gx)]
        })
    }
}
