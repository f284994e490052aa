//! Positional inputs for the mask regressor: the center-position embedding,
//! the Area Embedding, and their 1x1 projection to `P` channels.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SraError};
use crate::numerics::ops::{pointwise_linear, pointwise_linear_backward};
use crate::numerics::{LinearGrads, LinearParams, Tensor};
use crate::sampler::GridSize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    None,
    Position,
    #[default]
    Area,
}

impl EmbeddingMode {
    /// Depth of the raw embedding, 0 when disabled.
    pub fn raw_depth(self, m_axis: usize) -> usize {
        match self {
            EmbeddingMode::None => 0,
            EmbeddingMode::Position => 2,
            EmbeddingMode::Area => 2 * m_axis,
        }
    }
}

/// `(2, h, w)`: channel 0 holds `j/h*2-1`, channel 1 holds `k/w*2-1`, with
/// 1-based `j, k`. The range is `(2/h - 1, 1]`, not centered.
pub fn position_embedding_raw(grid: GridSize) -> Tensor {
    let (h, w) = (grid.h, grid.w);
    Tensor::from_fn(&[2, h, w], |i| {
        let (ch, pos) = (i / (h * w), i % (h * w));
        if ch == 0 {
            ((pos / w + 1) as f64) / h as f64 * 2.0 - 1.0
        } else {
            ((pos % w + 1) as f64) / w as f64 * 2.0 - 1.0
        }
    })
}

/// Linear resampling of the one-hot vector `e_index` (0-based) of length
/// `len` onto `target` cells. Source and target values sit at their cell
/// centers; targets beyond the outermost source centers clamp.
///
/// Positions are kept as exact integer fractions so that mirroring `index`
/// mirrors the output bit for bit.
pub fn upsample_one_hot(index: usize, len: usize, target: usize) -> Vec<f64> {
    let (len_i, target_i) = (len as i64, target as i64);
    let denom = 2 * target_i;
    (0..target_i)
        .map(|t| {
            // target cell center in 0-based source units is num / denom
            let num = ((2 * t + 1) * len_i - target_i).clamp(0, denom * (len_i - 1));
            let lo = num.div_euclid(denom);
            let rem = num - lo * denom;
            let lo = lo as usize;
            let mut v = 0.0;
            if lo == index {
                v += (denom - rem) as f64 / denom as f64;
            }
            if lo + 1 == index && rem > 0 {
                v += rem as f64 / denom as f64;
            }
            v
        })
        .collect()
}

/// `(2*m_axis, h, w)`: rows `0..m_axis` encode the covered row interval of
/// each cell, rows `m_axis..` the covered column interval.
pub fn area_embedding_raw(grid: GridSize, m_axis: usize) -> Result<Tensor> {
    let (h, w) = (grid.h, grid.w);
    if h == 0 || w == 0 || h > m_axis || w > m_axis {
        return Err(SraError::Config(format!(
            "area embedding needs 1 <= h, w <= {m_axis}, got {h}x{w}"
        )));
    }
    let rows: Vec<Vec<f64>> = (0..h).map(|j| upsample_one_hot(j, h, m_axis)).collect();
    let cols: Vec<Vec<f64>> = (0..w).map(|k| upsample_one_hot(k, w, m_axis)).collect();
    let plane = h * w;
    let mut data = vec![0.0; 2 * m_axis * plane];
    for j in 0..h {
        for k in 0..w {
            let pos = j * w + k;
            for t in 0..m_axis {
                data[t * plane + pos] = rows[j][t];
                data[(m_axis + t) * plane + pos] = cols[k][t];
            }
        }
    }
    Tensor::new(vec![2 * m_axis, h, w], data)
}

pub fn raw_embedding(mode: EmbeddingMode, grid: GridSize, m_axis: usize) -> Result<Option<Tensor>> {
    match mode {
        EmbeddingMode::None => Ok(None),
        EmbeddingMode::Position => Ok(Some(position_embedding_raw(grid))),
        EmbeddingMode::Area => area_embedding_raw(grid, m_axis).map(Some),
    }
}

/// Per-position projection of a raw embedding to `proj.out_dim()` channels.
pub fn project_embedding(raw: &Tensor, proj: &LinearParams) -> Result<Tensor> {
    let (depth, _, _) = raw.dims3("project_embedding")?;
    if depth != proj.in_dim() {
        return Err(SraError::shape(
            "project_embedding",
            format!("raw depth {}", proj.in_dim()),
            format!("raw depth {depth}"),
        ));
    }
    pointwise_linear(raw, proj)
}

pub fn project_embedding_backward(raw: &Tensor, proj: &LinearParams, dy: &Tensor) -> Result<LinearGrads> {
    pointwise_linear_backward(raw, proj, dy)
}

/// Memoized raw embeddings keyed by `(mode, grid, m_axis)`.
#[derive(Default)]
pub struct EmbeddingCache {
    entries: Mutex<HashMap<(EmbeddingMode, GridSize, usize), Arc<Tensor>>>,
}

impl EmbeddingCache {
    pub fn get(&self, mode: EmbeddingMode, grid: GridSize, m_axis: usize) -> Result<Option<Arc<Tensor>>> {
        if mode == EmbeddingMode::None {
            return Ok(None);
        }
        let key = (mode, grid, m_axis);
        if let Some(t) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(Some(Arc::clone(t)));
        }
        let t = Arc::new(raw_embedding(mode, grid, m_axis)?.expect("mode is not None"));
        self.entries.lock().expect("cache lock").insert(key, Arc::clone(&t));
        Ok(Some(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vertical(raw: &Tensor, m: usize, j: usize, k: usize) -> Vec<f64> {
        let (_, h, w) = raw.dims3("t").unwrap();
        assert!(j < h && k < w);
        (0..m).map(|t| raw.get3(t, j, k)).collect()
    }

    #[test]
    fn position_examples() {
        let p = position_embedding_raw(GridSize::new(2, 3));
        assert_eq!(p.get3(0, 0, 0), 0.0);
        assert_eq!(p.get3(0, 1, 2), 1.0);
        let p = position_embedding_raw(GridSize::new(1, 1));
        assert_eq!(p.data(), &[1.0, 1.0]);
        let p = position_embedding_raw(GridSize::new(4, 1));
        let col: Vec<f64> = (0..4).map(|j| p.get3(0, j, 0)).collect();
        assert_eq!(col, vec![-0.5, 0.0, 0.5, 1.0]);
        assert!(p.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn area_examples() {
        let raw = area_embedding_raw(GridSize::new(2, 3), 4).unwrap();
        assert_eq!(raw.dims(), &[8, 2, 3]);
        assert_eq!(vertical(&raw, 4, 0, 1), vec![1.0, 0.75, 0.25, 0.0]);
        assert_eq!(vertical(&raw, 4, 1, 2), vec![0.0, 0.25, 0.75, 1.0]);

        let raw = area_embedding_raw(GridSize::new(5, 2), 5).unwrap();
        for j in 0..5 {
            let v = vertical(&raw, 5, j, 1);
            for (t, x) in v.iter().enumerate() {
                assert_eq!(*x, if t == j { 1.0 } else { 0.0 });
            }
        }
        assert!(area_embedding_raw(GridSize::new(5, 2), 4).is_err());
        assert!(area_embedding_raw(GridSize::new(2, 9), 8).is_err());
    }

    #[test]
    fn area_rows_constant_across_other_axis() {
        let (h, w, m) = (3, 4, 7);
        let raw = area_embedding_raw(GridSize::new(h, w), m).unwrap();
        for j in 0..h {
            for k in 1..w {
                for t in 0..m {
                    assert_eq!(raw.get3(t, j, k), raw.get3(t, j, 0));
                }
            }
        }
        for k in 0..w {
            for j in 1..h {
                for t in m..2 * m {
                    assert_eq!(raw.get3(t, j, k), raw.get3(t, 0, k));
                }
            }
        }
    }

    #[test]
    fn mass_when_len_divides_target() {
        for (len, target) in [(2, 8), (4, 128), (8, 64), (16, 128), (3, 12)] {
            for j in 0..len {
                let s: f64 = upsample_one_hot(j, len, target).iter().sum();
                let nominal = target as f64 / len as f64;
                if j == 0 || j + 1 == len {
                    assert!(s >= nominal - 1e-9);
                } else {
                    assert!((s - nominal).abs() < 1e-9, "len {len} j {j}: {s}");
                }
            }
        }
    }

    #[test]
    fn projection_examples() {
        let raw = area_embedding_raw(GridSize::new(2, 2), 3).unwrap();
        assert_eq!(project_embedding(&raw, &LinearParams::identity(6)).unwrap(), raw);

        let mut proj = LinearParams::zeros(6, 2);
        proj.bias = Tensor::from_vec(vec![0.5, -2.0]);
        let out = project_embedding(&raw, &proj).unwrap();
        assert_eq!(out.dims(), &[2, 2, 2]);
        assert!(out.data()[..4].iter().all(|v| *v == 0.5));
        assert!(out.data()[4..].iter().all(|v| *v == -2.0));

        assert!(project_embedding(&raw, &LinearParams::zeros(5, 2)).is_err());
    }

    #[test]
    fn cache_returns_same_tensor() {
        let cache = EmbeddingCache::default();
        let a = cache.get(EmbeddingMode::Area, GridSize::new(3, 2), 8).unwrap().unwrap();
        let b = cache.get(EmbeddingMode::Area, GridSize::new(3, 2), 8).unwrap().unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert!(cache.get(EmbeddingMode::None, GridSize::new(3, 2), 8).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn reflection_equivariance(len in 1usize..20, extra in 0usize..40) {
            let target = len + extra;
            for j in 0..len {
                let mut rev = upsample_one_hot(len - 1 - j, len, target);
                rev.reverse();
                prop_assert_eq!(upsample_one_hot(j, len, target), rev);
            }
        }

        #[test]
        fn partition_of_unity(len in 1usize..20, extra in 0usize..40) {
            let target = len + extra;
            let mut total = vec![0.0; target];
            for j in 0..len {
                for (t, v) in upsample_one_hot(j, len, target).into_iter().enumerate() {
                    prop_assert!((0.0..=1.0).contains(&v));
                    total[t] += v;
                }
            }
            prop_assert!(total.iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
    }
}
