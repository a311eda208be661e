//! Projection-guided deformable sampling and masked fusion over cameras.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::LiftError;
use crate::ndtensor::{ParamStore, Result as TResult, Tensor, TensorError};
use crate::par;
use crate::triplane::Bilinear;

const QUERY_CHUNK: usize = 1024;

/// Reference point of a query in feature-map coordinates, `None` when the
/// query is not visible.
pub type Reference = Option<[f64; 2]>;

/// For each query `q` with a reference `(row, col)`:
/// `out_q = sum_k attn[q, k] * bilinear(feat, row + off[q, 2k + 1], col + off[q, 2k])`.
/// Queries without a reference produce zeros and receive no gradient.
pub fn deform_sample(feat: &Tensor, offsets: &Tensor, attn: &Tensor, refs: Arc<Vec<Reference>>) -> TResult<Tensor> {
    let &[hf, wf, d] = feat.shape() else {
        return Err(TensorError::Invalid {
            op: "deform_sample",
            msg: format!("feature map must be [H, W, D], got {:?}", feat.shape()),
        });
    };
    let q = refs.len();
    let k = attn.shape().get(1).copied().unwrap_or(0);
    if attn.shape() != [q, k] || offsets.shape() != [q, 2 * k] {
        return Err(TensorError::Invalid {
            op: "deform_sample",
            msg: format!(
                "{q} references, offsets {:?}, weights {:?}",
                offsets.shape(),
                attn.shape()
            ),
        });
    }
    let taps = {
        let refs = refs.clone();
        let off = offsets.clone();
        move |i: usize, j: usize| -> Option<Bilinear> {
            let [r, c] = refs[i]?;
            let o = off.data();
            Some(Bilinear::new(r + o[i * 2 * k + 2 * j + 1], c + o[i * 2 * k + 2 * j], hf, wf))
        }
    };
    let out = par::map_ranges(q, QUERY_CHUNK, |range| {
        let mut out = vec![0.0; range.len() * d];
        let mut s = vec![0.0; d];
        for (r, i) in range.enumerate() {
            for j in 0..k {
                let Some(b) = taps(i, j) else { break };
                s.fill(0.0);
                b.gather(feat.data(), d, &mut s);
                let a = attn.data()[i * k + j];
                out[r * d..(r + 1) * d].iter_mut().zip(&s).for_each(|(o, v)| *o += a * v);
            }
        }
        out
    })
    .concat();
    let (feat_in, attn_in) = (feat.clone(), attn.clone());
    Tensor::from_op(
        "deform_sample",
        out,
        &[q, d],
        vec![feat.clone(), offsets.clone(), attn.clone()],
        move |g, needs| {
            let d_feat = needs[0].then(|| {
                par::reduce_ranges(q, QUERY_CHUNK, hf * wf * d, |range, acc| {
                    let mut local = vec![0.0; d];
                    for i in range {
                        for j in 0..k {
                            let Some(b) = taps(i, j) else { break };
                            let a = attn_in.data()[i * k + j];
                            local.iter_mut().zip(&g[i * d..(i + 1) * d]).for_each(|(l, g)| *l = a * g);
                            b.scatter(&local, d, acc);
                        }
                    }
                })
            });
            let per_query = par::map_ranges(q, QUERY_CHUNK, |range| {
                let mut d_off = vec![0.0; range.len() * 2 * k];
                let mut d_attn = vec![0.0; range.len() * k];
                let mut s = vec![0.0; d];
                for (r, i) in range.enumerate() {
                    let gi = &g[i * d..(i + 1) * d];
                    for j in 0..k {
                        let Some(b) = taps(i, j) else { break };
                        s.fill(0.0);
                        b.gather(feat_in.data(), d, &mut s);
                        d_attn[r * k + j] = s.iter().zip(gi).map(|(s, g)| s * g).sum();
                        let (dr, dc) = b.position_grad(feat_in.data(), d, gi);
                        let a = attn_in.data()[i * k + j];
                        d_off[r * 2 * k + 2 * j] = a * dc;
                        d_off[r * 2 * k + 2 * j + 1] = a * dr;
                    }
                }
                (d_off, d_attn)
            });
            let (mut d_off, mut d_attn) = (Vec::with_capacity(q * 2 * k), Vec::with_capacity(q * k));
            for (o, a) in per_query {
                d_off.extend(o);
                d_attn.extend(a);
            }
            vec![d_feat, needs[1].then_some(d_off), needs[2].then_some(d_attn)]
        },
    )
}

/// Softmax fusion over cameras. `scores` is `[Q, C]`, each of `updates` is
/// `[Q, D]`, and `visible[c][q]` says whether camera `c` sees query `q`.
/// Queries seen by no camera pass `prev` through.
pub fn fuse_cameras(scores: &Tensor, updates: &[Tensor], prev: &Tensor, visible: Arc<Vec<Vec<bool>>>) -> TResult<Tensor> {
    let cams = updates.len();
    let &[q, d] = prev.shape() else {
        return Err(TensorError::Invalid {
            op: "fuse_cameras",
            msg: format!("queries must be [Q, D], got {:?}", prev.shape()),
        });
    };
    if scores.shape() != [q, cams] || visible.len() != cams || updates.iter().any(|u| u.shape() != [q, d]) {
        return Err(TensorError::Invalid {
            op: "fuse_cameras",
            msg: format!("scores {:?} for {cams} cameras and queries {:?}", scores.shape(), prev.shape()),
        });
    }
    let weights = {
        let vis = visible.clone();
        let sc = scores.clone();
        move |i: usize| -> Option<Vec<f64>> {
            let s = &sc.data()[i * cams..(i + 1) * cams];
            let m = (0..cams).filter(|&c| vis[c][i]).map(|c| s[c]).fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return None;
            }
            let e: Vec<f64> = (0..cams).map(|c| if vis[c][i] { (s[c] - m).exp() } else { 0.0 }).collect();
            let z: f64 = e.iter().sum();
            Some(e.into_iter().map(|v| v / z).collect())
        }
    };
    let out = par::map_ranges(q, QUERY_CHUNK, |range| {
        let mut out = Vec::with_capacity(range.len() * d);
        for i in range {
            match weights(i) {
                None => out.extend_from_slice(&prev.data()[i * d..(i + 1) * d]),
                Some(a) => {
                    let mut row = vec![0.0; d];
                    for (c, u) in updates.iter().enumerate() {
                        if a[c] == 0.0 {
                            continue;
                        }
                        row.iter_mut().zip(&u.data()[i * d..(i + 1) * d]).for_each(|(r, v)| *r += a[c] * v);
                    }
                    out.extend(row);
                }
            }
        }
        out
    })
    .concat();
    let ups: Vec<Tensor> = updates.to_vec();
    let fwd = out.clone();
    let mut inputs = vec![scores.clone(), prev.clone()];
    inputs.extend(updates.iter().cloned());
    Tensor::from_op("fuse_cameras", out, &[q, d], inputs, move |g, needs| {
        let mut d_scores = vec![0.0; q * cams];
        let mut d_prev = vec![0.0; q * d];
        let mut d_up: Vec<Vec<f64>> = (0..cams).map(|c| if needs[2 + c] { vec![0.0; q * d] } else { Vec::new() }).collect();
        for i in 0..q {
            let gi = &g[i * d..(i + 1) * d];
            match weights(i) {
                None => d_prev[i * d..(i + 1) * d].copy_from_slice(gi),
                Some(a) => {
                    let g_out: f64 = gi.iter().zip(&fwd[i * d..(i + 1) * d]).map(|(g, o)| g * o).sum();
                    for c in 0..cams {
                        if a[c] == 0.0 {
                            continue;
                        }
                        let u = &ups[c].data()[i * d..(i + 1) * d];
                        let g_u: f64 = gi.iter().zip(u).map(|(g, u)| g * u).sum();
                        d_scores[i * cams + c] = a[c] * (g_u - g_out);
                        if needs[2 + c] {
                            d_up[c][i * d..(i + 1) * d].iter_mut().zip(gi).for_each(|(du, g)| *du = a[c] * g);
                        }
                    }
                }
            }
        }
        let mut res = vec![needs[0].then_some(d_scores), needs[1].then_some(d_prev)];
        res.extend(d_up.into_iter().enumerate().map(|(c, v)| needs[2 + c].then_some(v)));
        res
    })
}

/// Weights of one per-image + cross-image attention round.
#[derive(Debug, Clone)]
pub struct AttentionRound {
    pub offset: (Tensor, Tensor),
    pub attn: (Tensor, Tensor),
    pub value: (Tensor, Tensor),
    pub score: (Tensor, Tensor),
}

fn uniform<R: Rng>(rng: &mut R, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("bound");
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl AttentionRound {
    pub fn init<R: Rng>(store: &mut ParamStore, round: usize, dim: usize, k: usize, rng: &mut R) -> Result<(), LiftError> {
        let p = format!("lift.r{round}");
        store.insert(&format!("{p}.offset.weight"), vec![0.0; dim * 2 * k], &[dim, 2 * k])?;
        store.insert(&format!("{p}.offset.bias"), vec![0.0; 2 * k], &[2 * k])?;
        store.insert(&format!("{p}.attn.weight"), uniform(rng, dim * k, dim, k), &[dim, k])?;
        store.insert(&format!("{p}.attn.bias"), vec![0.0; k], &[k])?;
        store.insert(&format!("{p}.value.weight"), uniform(rng, dim * dim, dim, dim), &[dim, dim])?;
        store.insert(&format!("{p}.value.bias"), vec![0.0; dim], &[dim])?;
        store.insert(&format!("{p}.score.weight"), uniform(rng, dim, dim, 1), &[dim, 1])?;
        store.insert(&format!("{p}.score.bias"), vec![0.0], &[1])?;
        Ok(())
    }

    pub fn from_store(store: &ParamStore, round: usize) -> Result<Self, LiftError> {
        let p = format!("lift.r{round}");
        let pair = |n: &str| -> Result<(Tensor, Tensor), LiftError> {
            Ok((
                store.get(&format!("{p}.{n}.weight"))?.clone(),
                store.get(&format!("{p}.{n}.bias"))?.clone(),
            ))
        };
        Ok(Self {
            offset: pair("offset")?,
            attn: pair("attn")?,
            value: pair("value")?,
            score: pair("score")?,
        })
    }

    pub fn offsets_per_query(&self) -> usize {
        self.attn.1.numel()
    }

    /// Per-image stage for one camera: `q + mask * value(sample)`.
    pub fn per_image(&self, q: &Tensor, feat: &Tensor, refs: Arc<Vec<Reference>>) -> TResult<Tensor> {
        let offsets = q.matmul(&self.offset.0)?.add_bias(&self.offset.1)?;
        let attn = q.matmul(&self.attn.0)?.add_bias(&self.attn.1)?.softmax()?;
        let sampled = deform_sample(feat, &offsets, &attn, refs.clone())?;
        let mask: Vec<f64> = refs.iter().map(|r| if r.is_some() { 1.0 } else { 0.0 }).collect();
        let update = sampled.matmul(&self.value.0)?.add_bias(&self.value.1)?.mask_rows(&mask)?;
        q.add(&update)
    }

    /// Cross-image stage over the per-camera updates.
    pub fn cross_image(&self, prev: &Tensor, updates: &[Tensor], visible: Arc<Vec<Vec<bool>>>) -> TResult<Tensor> {
        let scores = updates
            .iter()
            .map(|u| u.matmul(&self.score.0)?.add_bias(&self.score.1))
            .collect::<TResult<Vec<_>>>()?;
        let scores = Tensor::concat(&scores, 1)?;
        fuse_cameras(&scores, updates, prev, visible)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::param((0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    #[test]
    fn degenerate_attention_adds_the_reference_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let feat = rand_tensor(&mut rng, &[3, 4, 2], 1.0);
        let q = rand_tensor(&mut rng, &[3, 2], 1.0);
        let refs = Arc::new(vec![Some([0.5, 1.25]), None, Some([2.0, 3.0])]);
        let mut store = ParamStore::new();
        AttentionRound::init(&mut store, 0, 2, 1, &mut rng).unwrap();
        store.insert("lift.r0.value.weight", vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let round = AttentionRound::from_store(&store, 0).unwrap();
        let out = round.per_image(&q, &feat, refs.clone()).unwrap();
        for (i, r) in refs.iter().enumerate() {
            let want: Vec<f64> = match r {
                Some([a, b]) => {
                    let s = crate::triplane::sample_plane(feat.data(), 3, 4, 2, *a, *b);
                    q.data()[i * 2..i * 2 + 2].iter().zip(s).map(|(x, y)| x + y).collect()
                }
                None => q.data()[i * 2..i * 2 + 2].to_vec(),
            };
            assert_eq!(&out.data()[i * 2..i * 2 + 2], want.as_slice());
        }
    }

    #[test]
    fn deform_sample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feat = rand_tensor(&mut rng, &[4, 5, 3], 1.0);
        let refs = Arc::new(vec![Some([1.3, 2.2]), None, Some([0.4, 3.6]), Some([2.5, 1.5]), Some([2.1, 0.7])]);
        let off = rand_tensor(&mut rng, &[5, 4], 0.3);
        let attn = rand_tensor(&mut rng, &[5, 2], 1.0);
        let w = Tensor::new((0..15).map(|i| (i as f64 * 0.37).cos()).collect(), &[5, 3]).unwrap();
        let report = grad_check_many(
            |p| deform_sample(&p[0], &p[1], &p[2], refs.clone())?.mul(&w).map(|x| x.sum()),
            &[feat, off, attn],
            1e-6,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn fusion_single_camera_and_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prev = rand_tensor(&mut rng, &[3, 2], 1.0);
        let u = rand_tensor(&mut rng, &[3, 2], 1.0);
        let s = rand_tensor(&mut rng, &[3, 1], 1.0);
        let vis = Arc::new(vec![vec![true, false, true]]);
        let out = fuse_cameras(&s, std::slice::from_ref(&u), &prev, vis).unwrap();
        assert_eq!(&out.data()[..2], &u.data()[..2]);
        assert_eq!(&out.data()[2..4], &prev.data()[2..4]);
        let s2 = Tensor::concat(&[s.clone(), s.clone()], 1).unwrap();
        let vis2 = Arc::new(vec![vec![true; 3], vec![true; 3]]);
        let out2 = fuse_cameras(&s2, &[u.clone(), u.clone()], &prev, vis2).unwrap();
        for (a, b) in out2.data().iter().zip(u.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fusion_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = rand_tensor(&mut rng, &[4, 3], 1.0);
        let prev = rand_tensor(&mut rng, &[4, 2], 1.0);
        let ups: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[4, 2], 1.0)).collect();
        let vis = Arc::new(vec![
            vec![true, false, true, false],
            vec![true, false, false, true],
            vec![false, false, true, true],
        ]);
        let w = Tensor::new((0..8).map(|i| (i as f64 * 0.9).sin()).collect(), &[4, 2]).unwrap();
        let mut thetas = vec![s, prev];
        thetas.extend(ups);
        let report = grad_check_many(
            |p| fuse_cameras(&p[0], &p[2..], &p[1], vis.clone())?.mul(&w).map(|x| x.sum()),
            &thetas,
            1e-6,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
