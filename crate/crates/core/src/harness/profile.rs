//! Inference-cost profiler: exact token counts, measured tokenizer time and
//! modelled backbone prefill cost across cameras, frames, patch sizes and
//! backbone widths.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use super::{derived_rng, HarnessError, ProfileConfig, RigConfig};
use crate::geometry::{AxisWarp, GridWarp, RigFacing};
use crate::lifting::{LiftConfig, Lifter};
use crate::ndtensor::{ParamStore, Tensor};
use crate::renderer::Image;
use crate::tokenizer::{baseline_token_count, token_count, tokenize, PatchConfig, TokenProjection};
use crate::triplane::Triplane;

const PROFILE_STREAM: u64 = 5;
/// Row block of the attention probe; bounds its score buffer.
const PROBE_BLOCK: usize = 256;

/// Analytic per-layer transformer cost: `24 L D^2` for the QKV/output
/// projections and a 4x MLP, `4 L^2 D` for scores and weighted values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostModel {
    pub d_model: usize,
    pub layers: usize,
}

impl CostModel {
    pub fn projection_flops(&self, tokens: usize) -> f64 {
        let (l, d) = (tokens as f64, self.d_model as f64);
        self.layers as f64 * 24.0 * l * d * d
    }

    pub fn attention_flops(&self, tokens: usize) -> f64 {
        let (l, d) = (tokens as f64, self.d_model as f64);
        self.layers as f64 * 4.0 * l * l * d
    }

    pub fn prefill_flops(&self, tokens: usize) -> f64 {
        self.projection_flops(tokens) + self.attention_flops(tokens)
    }
}

/// Wall-clock statistics of repeated runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageTiming {
    pub mean_ms: f64,
    /// Half-width of the normal-approximation 95% interval of the mean.
    pub ci95_ms: f64,
    pub runs: usize,
}

impl StageTiming {
    pub fn measure(runs: usize, mut f: impl FnMut()) -> Self {
        let runs = runs.max(1);
        let samples: Vec<f64> = (0..runs)
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed().as_secs_f64() * 1e3
            })
            .collect();
        Self::from_samples(&samples)
    }

    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean_ms: mean,
            ci95_ms: 1.96 * (var / n).sqrt(),
            runs: samples.len(),
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            mean_ms: self.mean_ms * k,
            ci95_ms: self.ci95_ms * k,
            runs: self.runs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRow {
    pub tokenizer: String,
    pub patch: String,
    pub cameras: usize,
    pub frames: usize,
    pub d_model: usize,
    pub layers: usize,
    pub tokens: usize,
    pub tokens_per_image: f64,
    /// Per-image token saving relative to the baseline at the same camera
    /// and frame count.
    pub reduction: f64,
    pub tokenizer_ms: f64,
    pub tokenizer_ci95_ms: f64,
    pub prefill_gflops: f64,
    /// Measured time of one desk-width attention layer at this length.
    pub probe_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub rows: Vec<ProfileRow>,
    pub checks: Vec<Check>,
}

impl ScalingReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "tokenizer,patch,cameras,frames,d_model,layers,tokens,tokens_per_image,reduction,tokenizer_ms,tokenizer_ci95_ms,prefill_gflops,probe_ms\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.4},{:.6},{:.4},{:.4},{:.3},{:.4}",
                r.tokenizer,
                r.patch,
                r.cameras,
                r.frames,
                r.d_model,
                r.layers,
                r.tokens,
                r.tokens_per_image,
                r.reduction,
                r.tokenizer_ms,
                r.tokenizer_ci95_ms,
                r.prefill_gflops,
                r.probe_ms
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// `C = A B` with `A [m, k]` and `B` given by strides.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, b_strides: (isize, isize), c: &mut [f64]) {
    // SAFETY: the slices hold m*k, k*n and m*n elements addressed by the
    // given row-major / transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// One attention layer plus a 4x MLP on `tokens x dim` activations.
fn attention_probe(x: &[f64], w: &[f64], tokens: usize, dim: usize) -> f64 {
    let (l, d) = (tokens, dim);
    let mut qkv = vec![vec![0.0; l * d]; 3];
    for (i, m) in qkv.iter_mut().enumerate() {
        gemm(x, &w[i * d * d..(i + 1) * d * d], l, d, d, (d as isize, 1), m);
    }
    let (q, k, v) = (&qkv[0], &qkv[1], &qkv[2]);
    let mut out = vec![0.0; l * d];
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = vec![0.0; PROBE_BLOCK * l];
    for r0 in (0..l).step_by(PROBE_BLOCK) {
        let rows = PROBE_BLOCK.min(l - r0);
        let s = &mut scores[..rows * l];
        gemm(&q[r0 * d..(r0 + rows) * d], k, rows, d, l, (1, d as isize), s);
        for row in s.chunks_mut(l) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = ((*e - m) * scale).exp();
                z += *e;
            }
            row.iter_mut().for_each(|e| *e /= z);
        }
        gemm(s, v, rows, l, d, (d as isize, 1), &mut out[r0 * d..(r0 + rows) * d]);
    }
    let mut hidden = vec![0.0; l * 4 * d];
    gemm(&out, &w[3 * d * d..7 * d * d], l, d, 4 * d, (4 * d as isize, 1), &mut hidden);
    hidden.iter_mut().for_each(|h| *h = h.max(0.0));
    let mut y = vec![0.0; l * d];
    gemm(&hidden, &w[7 * d * d..11 * d * d], l, 4 * d, d, (d as isize, 1), &mut y);
    y.iter().sum()
}

fn measure_probe(tokens: usize, dim: usize, runs: usize, seed: u64) -> f64 {
    let mut rng = derived_rng(seed, PROFILE_STREAM, tokens as u64);
    let x: Vec<f64> = (0..tokens * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..11 * dim * dim).map(|_| rng.random_range(-0.1..0.1)).collect();
    let mut sink = 0.0;
    let t = StageTiming::measure(runs, || sink += attention_probe(&x, &w, tokens, dim));
    std::hint::black_box(sink);
    t.mean_ms
}

/// Copy of `store` that records no gradients, for timing inference.
fn frozen(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        out.insert_tensor(name, t.detach());
    }
    out
}

/// Desk-scale grid with the cell counts of `cells`.
fn desk_warp(cells: [usize; 3]) -> GridWarp {
    GridWarp {
        x: AxisWarp::symmetric(cells[0], cells[0] / 4, 1.0, 4.0),
        y: AxisWarp::symmetric(cells[1], cells[1] / 4, 1.0, 4.0),
        z: AxisWarp::one_sided(cells[2], cells[2] * 3 / 4, 0.5, 2.0, -2.0),
    }
}

fn fmt_patch(p: [usize; 3]) -> String {
    format!("{}x{}x{}", p[0], p[1], p[2])
}

/// Builds the scaling report. Token counts use `warp` exactly; timings use
/// the reduced desk configuration in `cfg`.
pub fn profile(warp: &GridWarp, cfg: &ProfileConfig, seed: u64) -> Result<ScalingReport, HarnessError> {
    if cfg.cameras.is_empty() || cfg.frames.is_empty() || cfg.patches.is_empty() || cfg.backbones.is_empty() {
        return Err(HarnessError::Config("profile axes must not be empty".into()));
    }
    if cfg.cameras.contains(&0) || cfg.frames.contains(&0) || cfg.baseline_patch == 0 {
        return Err(HarnessError::Config("camera, frame and patch counts must be positive".into()));
    }
    warp.validate()?;
    let cells = warp.cells();
    let patch_cfgs: Vec<PatchConfig> = cfg
        .patches
        .iter()
        .map(|p| PatchConfig {
            px: p[0],
            py: p[1],
            pz: p[2],
            d_ar: cfg.measure_d_ar,
            halfplane: cfg.halfplane,
            ..PatchConfig::default()
        })
        .collect();
    for p in &patch_cfgs {
        p.validate(cells)?;
    }
    let mut rng = derived_rng(seed, PROFILE_STREAM, 0);
    let dim = cfg.measure_feature_dim;

    // Triplane tokenizer, stage 1: lifting N desk-size images onto the desk
    // grid, once per camera count.
    let lift_cfg = LiftConfig {
        feature_dim: dim,
        encoder_hidden: 8,
        encoder_stages: 3,
        offsets: 2,
        rounds: 1,
    };
    let mut store = ParamStore::new();
    Lifter::init(&mut store, &lift_cfg, &mut rng)?;
    let lifter = Lifter::from_store(&frozen(&store), &lift_cfg)?;
    let dwarp = desk_warp(cfg.measure_cells);
    dwarp.validate()?;
    let [ih, iw] = cfg.measure_image;
    let mut lift_ms = Vec::new();
    for &n in &cfg.cameras {
        let rig = RigConfig {
            cameras: n,
            width: iw,
            height: ih,
            facing: RigFacing::All,
            ..RigConfig::default()
        }
        .build();
        let images: Vec<Image> = (0..n)
            .map(|_| {
                let mut img = Image::new(iw, ih, 3);
                img.data.iter_mut().for_each(|v| *v = rng.random());
                img
            })
            .collect();
        lifter.lift(&images, &rig, &dwarp)?;
        let t = StageTiming::measure(cfg.runs, || {
            std::hint::black_box(lifter.lift(&images, &rig, &dwarp).expect("validated lift"));
        });
        lift_ms.push(t);
    }

    // Stage 2: patchify and project a full-size triplane, and check the
    // emitted length against the counting law.
    let full = Triplane::constant(*warp, dim, 0.5, RigFacing::Front);
    let mut token_ms = Vec::new();
    let mut count_checks = Vec::new();
    for p in &patch_cfgs {
        let mut s = ParamStore::new();
        TokenProjection::ensure(&mut s, p, dim, &mut rng)?;
        let proj = TokenProjection::from_store(&frozen(&s))?;
        let seq = tokenize(&full, p, &proj)?;
        let want = token_count(cells, p)?.total;
        count_checks.push((fmt_patch(p.patch()), seq.len(), want));
        let t = StageTiming::measure(cfg.runs, || {
            std::hint::black_box(tokenize(&full, p, &proj).expect("validated tokenize"));
        });
        token_ms.push(t);
    }

    // Baseline tokenizer: linear patch embedding of one image.
    let bp = cfg.baseline_patch;
    let (bh, bw) = (cfg.baseline_height, cfg.baseline_width);
    let image = Tensor::new((0..bh * bw * 3).map(|_| rng.random()).collect(), &[bh, bw, 3])?;
    let embed_w = Tensor::new(
        (0..bp * bp * 3 * cfg.measure_d_ar).map(|_| rng.random_range(-0.01..0.01)).collect(),
        &[bp * bp * 3, cfg.measure_d_ar],
    )?;
    let embed = || -> Result<Tensor, HarnessError> {
        let (gh, gw) = (bh.div_ceil(bp), bw.div_ceil(bp));
        let mut patches = vec![0.0; gh * gw * bp * bp * 3];
        for r in 0..bh {
            for c in 0..bw {
                let t = (r / bp) * gw + c / bp;
                let o = ((t * bp + r % bp) * bp + c % bp) * 3;
                patches[o..o + 3].copy_from_slice(&image.data()[(r * bw + c) * 3..(r * bw + c) * 3 + 3]);
            }
        }
        Ok(Tensor::new(patches, &[gh * gw, bp * bp * 3])?.matmul(&embed_w)?)
    };
    embed()?;
    let base_ms = StageTiming::measure(cfg.runs, || {
        std::hint::black_box(embed().expect("baseline embed"));
    });

    let mut probe_cache: Vec<(usize, f64)> = Vec::new();
    let mut probe = |tokens: usize| -> f64 {
        if let Some(&(_, ms)) = probe_cache.iter().find(|(l, _)| *l == tokens) {
            return ms;
        }
        let ms = measure_probe(tokens, cfg.probe_dim, cfg.probe_runs, seed);
        probe_cache.push((tokens, ms));
        ms
    };

    let mut rows = Vec::new();
    for &[d_model, layers] in &cfg.backbones {
        let cost = CostModel { d_model, layers };
        for (ci, &n) in cfg.cameras.iter().enumerate() {
            for &f in &cfg.frames {
                let base_tokens = baseline_token_count(bh, bw, bp, n, f);
                let base_per = base_tokens as f64 / (n * f) as f64;
                let bt = base_ms.scaled((n * f) as f64);
                rows.push(ProfileRow {
                    tokenizer: "baseline".into(),
                    patch: bp.to_string(),
                    cameras: n,
                    frames: f,
                    d_model,
                    layers,
                    tokens: base_tokens,
                    tokens_per_image: base_per,
                    reduction: 0.0,
                    tokenizer_ms: bt.mean_ms,
                    tokenizer_ci95_ms: bt.ci95_ms,
                    prefill_gflops: cost.prefill_flops(base_tokens) / 1e9,
                    probe_ms: probe(base_tokens),
                });
                for (pi, p) in patch_cfgs.iter().enumerate() {
                    let tokens = token_count(cells, p)?.total * f;
                    let per = tokens as f64 / (n * f) as f64;
                    let lt = lift_ms[ci];
                    let tt = token_ms[pi];
                    let ms = (lt.mean_ms + tt.mean_ms) * f as f64;
                    let ci = (lt.ci95_ms.powi(2) + tt.ci95_ms.powi(2)).sqrt() * f as f64;
                    rows.push(ProfileRow {
                        tokenizer: if p.halfplane { "triplane-half" } else { "triplane" }.into(),
                        patch: fmt_patch(p.patch()),
                        cameras: n,
                        frames: f,
                        d_model,
                        layers,
                        tokens,
                        tokens_per_image: per,
                        reduction: 1.0 - per / base_per,
                        tokenizer_ms: ms,
                        tokenizer_ci95_ms: ci,
                        prefill_gflops: cost.prefill_flops(tokens) / 1e9,
                        probe_ms: probe(tokens),
                    });
                }
            }
        }
    }
    let checks = run_checks(&rows, &count_checks, &lift_ms, cfg);
    Ok(ScalingReport { rows, checks })
}

fn run_checks(rows: &[ProfileRow], counts: &[(String, usize, usize)], lift_ms: &[StageTiming], cfg: &ProfileConfig) -> Vec<Check> {
    let mut checks = Vec::new();
    let mut push = |name: &str, pass: bool, detail: String| {
        checks.push(Check {
            name: name.into(),
            pass,
            detail,
        })
    };
    push(
        "token counts match the tokenizer",
        counts.iter().all(|(_, got, want)| got == want),
        counts.iter().map(|(p, g, w)| format!("{p}: {g}/{w}")).collect::<Vec<_>>().join(" "),
    );
    let tri: Vec<&ProfileRow> = rows.iter().filter(|r| r.tokenizer != "baseline").collect();
    let base: Vec<&ProfileRow> = rows.iter().filter(|r| r.tokenizer == "baseline").collect();
    let constant = tri.iter().all(|r| {
        tri.iter()
            .filter(|o| o.patch == r.patch && o.frames == r.frames && o.tokenizer == r.tokenizer)
            .all(|o| o.tokens == r.tokens)
    });
    push("triplane tokens constant in cameras", constant, String::new());
    let linear_f = tri.iter().all(|r| {
        tri.iter()
            .filter(|o| o.patch == r.patch && o.cameras == r.cameras && o.tokenizer == r.tokenizer)
            .all(|o| o.tokens * r.frames == r.tokens * o.frames)
    });
    push("triplane tokens linear in frames", linear_f, String::new());
    let per = base.first().map_or(0, |r| r.tokens / (r.cameras * r.frames));
    let linear_nf = base.iter().all(|r| r.tokens == per * r.cameras * r.frames);
    push("baseline tokens linear in cameras x frames", linear_nf, format!("{per} per image"));

    // Longer sequences must cost more in the measured probe. Pairs closer
    // than 2x in length are skipped; timer noise dominates there.
    let mut lens: Vec<(usize, f64)> = rows.iter().map(|r| (r.tokens, r.probe_ms)).collect();
    lens.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    lens.dedup_by_key(|x| x.0);
    let mono = lens
        .iter()
        .all(|&(la, ta)| lens.iter().filter(|&&(lb, _)| lb >= 2 * la).all(|&(_, tb)| tb > ta));
    push(
        "measured prefill probe grows with sequence length",
        mono,
        lens.iter().map(|(l, t)| format!("{l}:{t:.2}ms")).collect::<Vec<_>>().join(" "),
    );
    // The triplane tokenizer does more work per camera while its output
    // length stays fixed: the tradeoff the report is about.
    let (mut lo, mut hi) = ((usize::MAX, 0.0), (0, 0.0));
    for (&n, t) in cfg.cameras.iter().zip(lift_ms) {
        if n < lo.0 {
            lo = (n, t.mean_ms);
        }
        if n > hi.0 {
            hi = (n, t.mean_ms);
        }
    }
    push(
        "measured triplane tokenizer time grows with cameras",
        hi.0 < 2 * lo.0 || hi.1 > lo.1,
        format!("{} cams {:.3}ms, {} cams {:.3}ms", lo.0, lo.1, hi.0, hi.1),
    );
    checks
}
