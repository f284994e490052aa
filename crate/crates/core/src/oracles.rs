//! Independent reference implementations.
//!
//! Each function here recomputes a library result by the most literal
//! route available (exhaustive search, explicit index loops) without
//! calling the kernel it checks. [`run_all`] compares both routes on random
//! cases and backs the `oracles` CLI subcommand.

use rand::Rng as _;
use serde::Serialize;

use crate::baselines::roi_pool;
use crate::embeddings::{project_embedding, EmbeddingMode};
use crate::error::Result;
use crate::numerics::{LayerNormParams, LinearParams, Tensor};
use crate::rng::{self, Rng};
use crate::sampler::{dynamic_grid_size, GridSize, RoiBox};
use crate::sra::{
    mask_logits, roi_descriptor, sample_roi_feature, semantic_feature_map, DescriptorMode, Regressor, SraConfig,
    SraParams,
};

/// Every grid with `h*w <= budget`, scored by `|h/w - height/width|`; ties
/// to larger area, then larger `h`.
pub fn exhaustive_grid_size(roi: &RoiBox, budget: usize) -> GridSize {
    let target = (roi.y1 - roi.y0) / (roi.x1 - roi.x0);
    let mut best = (f64::INFINITY, 0usize, 0usize);
    for h in 1..=budget {
        for w in 1..=budget {
            if h * w > budget {
                break;
            }
            let err = (h as f64 / w as f64 - target).abs();
            let (be, bh, bw) = best;
            if err < be || (err == be && (h * w, h) > (bh * bw, bh)) {
                best = (err, h, w);
            }
        }
    }
    GridSize::new(best.1, best.2)
}

/// Triple loop over `(n, c, j, k)`.
pub fn weighted_sum(f: &Tensor, m: &Tensor) -> Tensor {
    let (c, h, w) = (f.dims()[0], f.dims()[1], f.dims()[2]);
    let n = m.dims()[0];
    let mut out = Tensor::zeros(&[n, c]);
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = 0.0;
            for j in 0..h {
                for k in 0..w {
                    acc += f.get3(ci, j, k) * m.get3(ni, j, k);
                }
            }
            out.data_mut()[ni * c + ci] = acc;
        }
    }
    out
}

fn matvec(p: &LinearParams, x: &[f64]) -> Vec<f64> {
    let (out_dim, in_dim) = (p.out_dim(), p.in_dim());
    (0..out_dim)
        .map(|o| {
            let mut acc = p.bias.data()[o];
            for (i, xi) in x.iter().enumerate().take(in_dim) {
                acc += p.weight.data()[o * in_dim + i] * xi;
            }
            acc
        })
        .collect()
}

/// Per-position matrix product `out(:, j, k) = W x(:, j, k) + b`.
pub fn pointwise(x: &Tensor, p: &LinearParams) -> Tensor {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let k_out = p.out_dim();
    let mut out = Tensor::zeros(&[k_out, h, w]);
    for j in 0..h {
        for k in 0..w {
            let col: Vec<f64> = (0..c).map(|ci| x.get3(ci, j, k)).collect();
            for (o, v) in matvec(p, &col).into_iter().enumerate() {
                out.data_mut()[(o * h + j) * w + k] = v;
            }
        }
    }
    out
}

pub fn channel_mean(f: &Tensor) -> Vec<f64> {
    let (c, h, w) = (f.dims()[0], f.dims()[1], f.dims()[2]);
    (0..c)
        .map(|ci| {
            let mut acc = 0.0;
            for j in 0..h {
                for k in 0..w {
                    acc += f.get3(ci, j, k);
                }
            }
            acc / (h * w) as f64
        })
        .collect()
}

pub fn channel_max(f: &Tensor) -> Vec<f64> {
    let (c, h, w) = (f.dims()[0], f.dims()[1], f.dims()[2]);
    (0..c)
        .map(|ci| {
            let mut best = f64::NEG_INFINITY;
            for j in 0..h {
                for k in 0..w {
                    best = best.max(f.get3(ci, j, k));
                }
            }
            best
        })
        .collect()
}

pub fn descriptor(f: &Tensor, mode: DescriptorMode, psi: &LinearParams) -> Vec<f64> {
    let summary = match mode {
        DescriptorMode::Average => channel_mean(f),
        DescriptorMode::Maximum => channel_max(f),
        DescriptorMode::Concatenation => f.data().to_vec(),
    };
    matvec(psi, &summary)
}

fn norm(p: &LayerNormParams, x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| p.gain.data()[i] * (v - mean) / (var + p.epsilon).sqrt() + p.shift.data()[i])
        .collect()
}

fn relu(x: Vec<f64>) -> Vec<f64> {
    x.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect()
}

fn regress(r: &Regressor, z: &[f64]) -> Vec<f64> {
    let hidden = matvec(&r.trunk_linear, &relu(norm(&r.trunk_norm, z)));
    matvec(&r.head_linear, &relu(norm(&r.head_norm, &hidden)))
}

/// Position loop applying the two Norm-ReLU-Linear blocks to `[d, s, p]`.
pub fn logits(d: &[f64], s: &Tensor, p: Option<&Tensor>, params: &SraParams) -> Tensor {
    let (k, h, w) = (s.dims()[0], s.dims()[1], s.dims()[2]);
    let n: usize = params.regressors.iter().map(|r| r.head_linear.out_dim()).sum();
    let mut out = Tensor::zeros(&[n, h, w]);
    for j in 0..h {
        for kk in 0..w {
            let mut z = d.to_vec();
            z.extend((0..k).map(|c| s.get3(c, j, kk)));
            if let Some(p) = p {
                z.extend((0..p.dims()[0]).map(|c| p.get3(c, j, kk)));
            }
            let mut first = 0;
            for r in &params.regressors {
                for (o, v) in regress(r, &z).into_iter().enumerate() {
                    out.data_mut()[((first + o) * h + j) * w + kk] = v;
                }
                first += r.head_linear.out_dim();
            }
        }
    }
    out
}

/// Max over the pixels of each quantized bin, written out longhand.
pub fn quantized_max_pool(map: &Tensor, roi: &RoiBox, out: GridSize) -> Tensor {
    let (c, hh, ww) = (map.dims()[0], map.dims()[1], map.dims()[2]);
    let (sx, sy) = (roi.x0.round(), roi.y0.round());
    let ext_w = (roi.x1.round() - sx + 1.0).max(1.0);
    let ext_h = (roi.y1.round() - sy + 1.0).max(1.0);
    let mut res = Tensor::zeros(&[out.h, out.w, c]);
    for a in 0..out.h {
        for b in 0..out.w {
            let bh = ext_h / out.h as f64;
            let bw = ext_w / out.w as f64;
            let mut y_lo = (sy + (a as f64 * bh).floor()).max(0.0).min(hh as f64) as usize;
            let mut y_hi = (sy + ((a + 1) as f64 * bh).ceil()).max(0.0).min(hh as f64) as usize;
            let mut x_lo = (sx + (b as f64 * bw).floor()).max(0.0).min(ww as f64) as usize;
            let mut x_hi = (sx + ((b + 1) as f64 * bw).ceil()).max(0.0).min(ww as f64) as usize;
            if y_hi <= y_lo {
                y_lo = (sy + (a as f64 + 0.5) * bh - 0.5).round().max(0.0).min((hh - 1) as f64) as usize;
                y_hi = y_lo + 1;
            }
            if x_hi <= x_lo {
                x_lo = (sx + (b as f64 + 0.5) * bw - 0.5).round().max(0.0).min((ww - 1) as f64) as usize;
                x_hi = x_lo + 1;
            }
            for ci in 0..c {
                let mut best = f64::NEG_INFINITY;
                for y in y_lo..y_hi {
                    for x in x_lo..x_hi {
                        best = best.max(map.get3(ci, y, x));
                    }
                }
                res.data_mut()[(a * out.w + b) * c + ci] = best;
            }
        }
    }
    res
}

pub fn random_tensor(dims: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

/// Random `(N, h, w)` masks, nonnegative, each slice summing to 1.
pub fn random_masks(n: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor {
    let mut m = Tensor::from_fn(&[n, h, w], |_| rng.gen_range(0.0..1.0));
    for slice in m.data_mut().chunks_mut(h * w) {
        let s: f64 = slice.iter().sum();
        slice.iter_mut().for_each(|v| *v /= s);
    }
    m
}

pub fn random_box(rng: &mut Rng, max_extent: f64) -> RoiBox {
    let x0 = rng.gen_range(0.0..max_extent);
    let y0 = rng.gen_range(0.0..max_extent);
    let w = rng.gen_range(0.05..max_extent);
    let h = rng.gen_range(0.05..max_extent);
    RoiBox {
        x0,
        y0,
        x1: x0 + w,
        y1: y0 + h,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleResult {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn result(name: &str, cases: usize, max_error: f64, tolerance: f64) -> OracleResult {
    OracleResult {
        name: name.to_string(),
        cases,
        max_error,
        tolerance,
        passed: max_error <= tolerance,
    }
}

fn small_config(rng: &mut Rng) -> SraConfig {
    let embedding = [EmbeddingMode::None, EmbeddingMode::Position, EmbeddingMode::Area][rng.gen_range(0..3)];
    SraConfig {
        n_masks: rng.gen_range(1..5),
        budget: 16,
        descriptor_dim: rng.gen_range(1..6),
        embed_dim: rng.gen_range(1..4),
        hidden: rng.gen_range(1..7),
        embedding,
        independent_heads: rng.gen_bool(0.5),
        ..SraConfig::default()
    }
}

/// Runs every comparison. All must pass for the library to be trusted.
pub fn run_all(seed: u64) -> Result<Vec<OracleResult>> {
    let mut out = Vec::new();

    let mut rng = rng::stream(seed, "oracles.grid");
    let mut mismatches = 0;
    let mut cases = 0;
    for budget in [1, 32, 64, 128, 256] {
        for _ in 0..1000 {
            let b = random_box(&mut rng, 100.0);
            cases += 1;
            if dynamic_grid_size(&b, budget)? != exhaustive_grid_size(&b, budget) {
                mismatches += 1;
            }
        }
    }
    out.push(result("dynamic_grid_size_vs_exhaustive", cases, mismatches as f64, 0.0));

    let mut rng = rng::stream(seed, "oracles.weighted_sum");
    let mut err = 0.0f64;
    for _ in 0..100 {
        let (c, n, h, w) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9));
        let f = random_tensor(&[c, h, w], &mut rng);
        let m = random_masks(n, h, w, &mut rng);
        err = err.max(sample_roi_feature(&f, &m)?.max_abs_diff(&weighted_sum(&f, &m)));
    }
    out.push(result("sample_roi_feature_vs_triple_loop", 100, err, 1e-12));

    let mut rng = rng::stream(seed, "oracles.pointwise");
    let (mut err_sem, mut err_emb, mut err_desc) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let (c, k, h, w) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..6), rng.gen_range(1..6));
        let f = random_tensor(&[c, h, w], &mut rng);
        let conv = LinearParams::new(random_tensor(&[k, c], &mut rng), random_tensor(&[k], &mut rng))?;
        err_sem = err_sem.max(semantic_feature_map(&f, &conv)?.max_abs_diff(&pointwise(&f, &conv)));
        err_emb = err_emb.max(project_embedding(&f, &conv)?.max_abs_diff(&pointwise(&f, &conv)));
        for mode in [DescriptorMode::Average, DescriptorMode::Maximum] {
            let d = roi_descriptor(&f, mode, &conv)?;
            let want = Tensor::from_vec(descriptor(&f, mode, &conv));
            err_desc = err_desc.max(d.max_abs_diff(&want));
        }
    }
    out.push(result("semantic_feature_map_vs_loop", 50, err_sem, 1e-12));
    out.push(result("project_embedding_vs_loop", 50, err_emb, 1e-12));
    out.push(result("roi_descriptor_vs_loop", 100, err_desc, 1e-12));

    let mut rng = rng::stream(seed, "oracles.logits");
    let mut err = 0.0f64;
    for i in 0..50 {
        let cfg = small_config(&mut rng);
        let (h, w) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let params = SraParams::init(&cfg, 3, &mut rng::indexed_stream(seed, "oracles.logits.init", i))?;
        let d = random_tensor(&[cfg.descriptor_dim], &mut rng);
        let s = random_tensor(&[cfg.descriptor_dim, h, w], &mut rng);
        let p = (cfg.embedding != EmbeddingMode::None).then(|| random_tensor(&[cfg.embed_dim, h, w], &mut rng));
        let got = mask_logits(&d, &s, p.as_ref(), &params)?;
        err = err.max(got.max_abs_diff(&logits(d.data(), &s, p.as_ref(), &params)));
    }
    out.push(result("mask_logits_vs_position_loop", 50, err, 1e-10));

    let mut rng = rng::stream(seed, "oracles.roi_pool");
    let mut err = 0.0f64;
    for _ in 0..50 {
        let map = random_tensor(&[2, 8, 8], &mut rng);
        let b = random_box(&mut rng, 7.0);
        let out_grid = GridSize::new(rng.gen_range(1..4), rng.gen_range(1..4));
        let got = roi_pool(&map, &b, out_grid)?;
        err = err.max(got.tensor().max_abs_diff(&quantized_max_pool(&map, &b, out_grid)));
    }
    out.push(result("roi_pool_vs_quantized_bins", 50, err, 0.0));

    Ok(out)
}
