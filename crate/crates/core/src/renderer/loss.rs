//! Photometric, perceptual and depth losses.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::RenderError;
use crate::ndtensor::{SparseMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerceptualKind {
    #[default]
    GradientPyramid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_perceptual: f64,
    pub lambda_l1: f64,
    pub lambda_depth: f64,
    pub perceptual: PerceptualKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_perceptual: 0.5,
            lambda_l1: 0.5,
            lambda_depth: 0.0,
            perceptual: PerceptualKind::GradientPyramid,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        for (name, v) in [
            ("lambda_perceptual", self.lambda_perceptual),
            ("lambda_l1", self.lambda_l1),
            ("lambda_depth", self.lambda_depth),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(RenderError::Config(format!("{name} must be a finite non-negative weight, got {v}")));
            }
        }
        Ok(())
    }

    pub fn perceptual_impl(&self) -> Box<dyn Perceptual> {
        match self.perceptual {
            PerceptualKind::GradientPyramid => Box::new(GradientPyramid::default()),
        }
    }
}

/// A differentiable image distance over `[h, w, c]` or `[P, h, w, c]`
/// tensors.
pub trait Perceptual: Send + Sync {
    fn name(&self) -> &'static str;
    fn distance(&self, target: &Tensor, pred: &Tensor) -> Result<Tensor, RenderError>;
}

/// Mean L1 distance between image gradients over a Gaussian pyramid.
pub struct GradientPyramid {
    pub levels: usize,
    maps: Mutex<HashMap<[usize; 4], Arc<PyramidMaps>>>,
}

impl Default for GradientPyramid {
    fn default() -> Self {
        Self::new(3)
    }
}

impl GradientPyramid {
    pub fn new(levels: usize) -> Self {
        Self {
            levels,
            maps: Mutex::new(HashMap::new()),
        }
    }
}

struct Level {
    dx: Option<(Arc<SparseMap>, usize)>,
    dy: Option<(Arc<SparseMap>, usize)>,
    down: Option<(Arc<SparseMap>, [usize; 4])>,
}

struct PyramidMaps {
    levels: Vec<Level>,
}

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn flat(s: [usize; 4], p: usize, r: usize, c: usize, k: usize) -> usize {
    ((p * s[1] + r) * s[2] + c) * s[3] + k
}

fn build_maps(shape: [usize; 4], levels: usize) -> PyramidMaps {
    let mut out = Vec::new();
    let mut s = shape;
    for l in 0..levels {
        let [np, h, w, ch] = s;
        let n_in = np * h * w * ch;
        let diff = |dr: usize, dc: usize| -> Option<(Arc<SparseMap>, usize)> {
            let (oh, ow) = (h.checked_sub(dr)?, w.checked_sub(dc)?);
            if oh == 0 || ow == 0 {
                return None;
            }
            let os = [np, oh, ow, ch];
            let mut e = Vec::with_capacity(np * oh * ow * ch * 2);
            for p in 0..np {
                for r in 0..oh {
                    for c in 0..ow {
                        for k in 0..ch {
                            let o = flat(os, p, r, c, k);
                            e.push((o, flat(s, p, r + dr, c + dc, k), 1.0));
                            e.push((o, flat(s, p, r, c, k), -1.0));
                        }
                    }
                }
            }
            let rows = np * oh * ow * ch;
            Some((Arc::new(SparseMap::from_triplets(rows, n_in, e)), rows))
        };
        let down = (l + 1 < levels && (h > 1 || w > 1)).then(|| {
            let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
            let os = [np, oh, ow, ch];
            let mut e = Vec::new();
            for p in 0..np {
                for r in 0..oh {
                    for c in 0..ow {
                        for (i, wr) in BINOMIAL.iter().enumerate() {
                            let sr = (2 * r + i).saturating_sub(2).min(h - 1);
                            for (j, wc) in BINOMIAL.iter().enumerate() {
                                let sc = (2 * c + j).saturating_sub(2).min(w - 1);
                                for k in 0..ch {
                                    e.push((flat(os, p, r, c, k), flat(s, p, sr, sc, k), wr * wc));
                                }
                            }
                        }
                    }
                }
            }
            (Arc::new(SparseMap::from_triplets(np * oh * ow * ch, n_in, e)), os)
        });
        let next = down.as_ref().map(|d| d.1);
        out.push(Level {
            dx: diff(0, 1),
            dy: diff(1, 0),
            down,
        });
        match next {
            Some(n) => s = n,
            None => break,
        }
    }
    PyramidMaps { levels: out }
}

fn as_batch(t: &Tensor) -> Result<[usize; 4], RenderError> {
    match *t.shape() {
        [h, w, c] => Ok([1, h, w, c]),
        [p, h, w, c] => Ok([p, h, w, c]),
        _ => Err(RenderError::Config(format!("expected an image tensor, got shape {:?}", t.shape()))),
    }
}

impl Perceptual for GradientPyramid {
    fn name(&self) -> &'static str {
        "gradient-pyramid"
    }

    fn distance(&self, target: &Tensor, pred: &Tensor) -> Result<Tensor, RenderError> {
        same_shape("perceptual", target, pred)?;
        let shape = as_batch(pred)?;
        let maps = self
            .maps
            .lock()
            .unwrap()
            .entry(shape)
            .or_insert_with(|| Arc::new(build_maps(shape, self.levels)))
            .clone();
        let mut e = pred.sub(target)?.reshape(&[pred.numel()])?;
        let mut terms = Vec::new();
        for level in &maps.levels {
            for (m, rows) in [&level.dx, &level.dy].into_iter().flatten() {
                terms.push(e.apply_sparse(m, &[*rows])?.abs().mean());
            }
            if let Some((m, s)) = &level.down {
                e = e.apply_sparse(m, &[s.iter().product()])?;
            }
        }
        if terms.is_empty() {
            return Ok(Tensor::scalar(0.0));
        }
        let n = terms.len() as f64;
        let total = terms[1..].iter().try_fold(terms[0].clone(), |acc, t| acc.add(t))?;
        Ok(total.scale(1.0 / n))
    }
}

fn same_shape(what: &'static str, a: &Tensor, b: &Tensor) -> Result<(), RenderError> {
    if a.shape() != b.shape() {
        return Err(RenderError::ShapeMismatch {
            what,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `mean |a - b|`.
pub fn l1_loss(target: &Tensor, pred: &Tensor) -> Result<Tensor, RenderError> {
    same_shape("l1", target, pred)?;
    Ok(pred.sub(target)?.abs().mean())
}

/// `lambda_p * perceptual(I, I_hat) + lambda_1 * mean |I - I_hat|`.
pub fn reconstruction_loss(
    target: &Tensor,
    pred: &Tensor,
    cfg: &LossConfig,
    perceptual: &dyn Perceptual,
) -> Result<Tensor, RenderError> {
    same_shape("reconstruction", target, pred)?;
    let mut loss = l1_loss(target, pred)?.scale(cfg.lambda_l1);
    if cfg.lambda_perceptual > 0.0 {
        loss = loss.add(&perceptual.distance(target, pred)?.scale(cfg.lambda_perceptual))?;
    }
    Ok(loss)
}

/// `lambda_d * mean |d - d_hat|`.
pub fn depth_loss(target: &Tensor, pred: &Tensor, lambda_d: f64) -> Result<Tensor, RenderError> {
    same_shape("depth", target, pred)?;
    Ok(l1_loss(target, pred)?.scale(lambda_d))
}
