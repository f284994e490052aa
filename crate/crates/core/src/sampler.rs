//! Dynamic Feature Sampler: per-RoI grid selection under an area budget and
//! block-average pooling of the RoI onto that grid.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SraError};
use crate::numerics::ops::bilinear_taps;
use crate::numerics::{DiffOp, Tensor};

/// Axis-aligned box in continuous feature-map coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RoiBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = RoiBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite());
        if !finite || self.x1 <= self.x0 || self.y1 <= self.y0 {
            return Err(SraError::Config(format!("invalid RoI box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.y0 + self.y1), 0.5 * (self.x0 + self.x1))
    }

    /// Height over width.
    pub fn aspect(&self) -> f64 {
        self.height() / self.width()
    }

    pub fn transposed(&self) -> RoiBox {
        RoiBox {
            x0: self.y0,
            y0: self.x0,
            x1: self.y1,
            y1: self.x1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSize {
    pub h: usize,
    pub w: usize,
}

impl GridSize {
    pub const FIXED: GridSize = GridSize { h: 8, w: 8 };

    pub fn new(h: usize, w: usize) -> Self {
        GridSize { h, w }
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn transposed(&self) -> GridSize {
        GridSize { h: self.w, w: self.h }
    }
}

/// Picks the grid whose rows/columns ratio is closest to the box's
/// height/width, among all grids with `h * w <= budget`.
///
/// Ties go to the larger area, then to the larger `h`.
pub fn dynamic_grid_size(roi: &RoiBox, budget: usize) -> Result<GridSize> {
    if budget == 0 {
        return Err(SraError::Config("grid budget must be at least 1".into()));
    }
    roi.validate()?;
    let target = roi.aspect();
    // For a fixed h the error |h/w - target| is unimodal in w, so only the
    // two integers around h/target can win.
    let mut best: Option<(f64, usize, usize)> = None;
    for h in 1..=budget {
        let w_max = budget / h;
        let ideal = h as f64 / target;
        let lo = (ideal.floor() as usize).clamp(1, w_max);
        let hi = (ideal.ceil() as usize).clamp(1, w_max);
        for w in [lo, hi] {
            let err = (h as f64 / w as f64 - target).abs();
            let better = match best {
                None => true,
                Some((be, bh, bw)) => err < be || (err == be && (h * w > bh * bw || (h * w == bh * bw && h > bh))),
            };
            if better {
                best = Some((err, h, w));
            }
        }
    }
    let (_, h, w) = best.expect("budget >= 1 yields a candidate");
    Ok(GridSize { h, w })
}

/// Fractions of a block at which the 2x2 bilinear samples are placed.
const SAMPLE_FRACTIONS: [f64; 2] = [0.25, 0.75];

/// Precomputed bilinear taps of every output cell of a pooled grid.
#[derive(Clone, Debug)]
pub struct PoolPlan {
    pub grid: GridSize,
    channels: usize,
    plane: usize,
    /// 16 `(flat spatial index, weight)` taps per cell, weights sum to 1.
    taps: Vec<[(usize, f64); 16]>,
}

impl PoolPlan {
    pub fn new(map_dims: &[usize], roi: &RoiBox, grid: GridSize) -> Result<Self> {
        let [c, hh, ww] = map_dims[..] else {
            return Err(SraError::shape("block_average_pool", "(C, H, W) map", format!("{map_dims:?}")));
        };
        roi.validate()?;
        if grid.h == 0 || grid.w == 0 {
            return Err(SraError::Config(format!("empty grid {grid:?}")));
        }
        let bh = roi.height() / grid.h as f64;
        let bw = roi.width() / grid.w as f64;
        let mut taps = Vec::with_capacity(grid.area());
        for a in 0..grid.h {
            for b in 0..grid.w {
                let mut cell = [(0usize, 0.0f64); 16];
                let mut n = 0;
                for fy in SAMPLE_FRACTIONS {
                    let y = roi.y0 + (a as f64 + fy) * bh;
                    for fx in SAMPLE_FRACTIONS {
                        let x = roi.x0 + (b as f64 + fx) * bw;
                        for (i, wt) in bilinear_taps(hh, ww, y, x) {
                            cell[n] = (i, 0.25 * wt);
                            n += 1;
                        }
                    }
                }
                taps.push(cell);
            }
        }
        Ok(PoolPlan {
            grid,
            channels: c,
            plane: hh * ww,
            taps,
        })
    }

    fn check_map(&self, f: &Tensor) -> Result<()> {
        let (c, h, w) = f.dims3("block_average_pool")?;
        if c != self.channels || h * w != self.plane {
            return Err(SraError::shape("block_average_pool", "map matching the pooling plan", format!("{:?}", f.dims())));
        }
        Ok(())
    }

    /// `(C, h, w)` pooled map.
    pub fn apply(&self, f: &Tensor) -> Result<Tensor> {
        self.check_map(f)?;
        let cells = self.grid.area();
        let mut out = vec![0.0; self.channels * cells];
        for ch in 0..self.channels {
            let src = &f.data()[ch * self.plane..(ch + 1) * self.plane];
            for (cell, taps) in self.taps.iter().enumerate() {
                out[ch * cells + cell] = taps.iter().map(|&(i, wt)| wt * src[i]).sum();
            }
        }
        Tensor::new(vec![self.channels, self.grid.h, self.grid.w], out)
    }

    /// Adjoint of [`PoolPlan::apply`]; `map_dims` is the `(C, H, W)` source shape.
    pub fn apply_adjoint(&self, map_dims: &[usize], dy: &Tensor) -> Result<Tensor> {
        if dy.len() != self.channels * self.grid.area() {
            return Err(SraError::shape(
                "block_average_pool_backward",
                format!("({}, {}, {})", self.channels, self.grid.h, self.grid.w),
                format!("{:?}", dy.dims()),
            ));
        }
        let mut df = Tensor::zeros(map_dims);
        let cells = self.grid.area();
        for ch in 0..self.channels {
            let dst = &mut df.data_mut()[ch * self.plane..(ch + 1) * self.plane];
            for (cell, taps) in self.taps.iter().enumerate() {
                let g = dy.data()[ch * cells + cell];
                for &(i, wt) in taps {
                    dst[i] += wt * g;
                }
            }
        }
        Ok(df)
    }
}

/// Divides `roi` into `grid` equal blocks and averages each block with a
/// 2x2 set of bilinear samples at the block's quarter points.
pub fn block_average_pool(f: &Tensor, roi: &RoiBox, grid: GridSize) -> Result<Tensor> {
    PoolPlan::new(f.dims(), roi, grid)?.apply(f)
}

pub fn block_average_pool_backward(map_dims: &[usize], roi: &RoiBox, grid: GridSize, dy: &Tensor) -> Result<Tensor> {
    PoolPlan::new(map_dims, roi, grid)?.apply_adjoint(map_dims, dy)
}

/// Inputs: `[feature_map]`.
pub struct BlockAveragePoolOp {
    pub roi: RoiBox,
    pub grid: GridSize,
}

impl DiffOp for BlockAveragePoolOp {
    fn name(&self) -> &'static str {
        "block_average_pool"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        block_average_pool(&inputs[0], &self.roi, self.grid)
    }

    fn vjp(&self, inputs: &[Tensor], _output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![block_average_pool_backward(inputs[0].dims(), &self.roi, self.grid, cotangent)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_vjp, GradCheckConfig};
    use proptest::prelude::*;

    fn roi(x0: f64, y0: f64, x1: f64, y1: f64) -> RoiBox {
        RoiBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn grid_examples() {
        assert_eq!(dynamic_grid_size(&roi(0.0, 0.0, 100.0, 100.0), 128).unwrap(), GridSize::new(11, 11));
        assert_eq!(dynamic_grid_size(&roi(3.0, 1.0, 40.0, 9.5), 1).unwrap(), GridSize::new(1, 1));
        assert_eq!(dynamic_grid_size(&roi(0.0, 0.0, 200.0, 50.0), 128).unwrap(), GridSize::new(5, 20));
        assert!(dynamic_grid_size(&roi(0.0, 0.0, 1.0, 1.0), 0).is_err());
    }

    #[test]
    fn square_boxes_take_largest_square() {
        for budget in 1..300usize {
            let k = (budget as f64).sqrt().floor() as usize;
            let g = dynamic_grid_size(&roi(2.0, 2.0, 9.0, 9.0), budget).unwrap();
            assert_eq!(g, GridSize::new(k, k), "budget {budget}");
        }
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(RoiBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(RoiBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(RoiBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
    }

    #[test]
    fn pool_examples() {
        let f = Tensor::filled(&[3, 6, 5], 2.5);
        let out = block_average_pool(&f, &roi(0.3, 1.2, 4.1, 5.9), GridSize::new(3, 4)).unwrap();
        assert_eq!(out.dims(), &[3, 3, 4]);
        assert!(out.data().iter().all(|v| (v - 2.5).abs() < 1e-14));

        let f = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = block_average_pool(&f, &roi(0.0, 0.0, 1.0, 1.0), GridSize::new(1, 1)).unwrap();
        assert!((out.data()[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_box_returns_the_pixel() {
        let f = Tensor::from_fn(&[2, 5, 5], |i| ((i * 7) % 13) as f64);
        let (j, k) = (3.0, 1.0);
        let tiny = roi(k - 1e-9, j - 1e-9, k + 1e-9, j + 1e-9);
        let out = block_average_pool(&f, &tiny, GridSize::new(1, 1)).unwrap();
        for c in 0..2 {
            assert!((out.data()[c] - f.get3(c, 3, 1)).abs() < 1e-7);
        }
        // a tiny box outside the map clamps onto the corner pixel
        let outside = roi(-9.0, -9.0, -8.9, -8.9);
        let out = block_average_pool(&f, &outside, GridSize::new(1, 1)).unwrap();
        assert_eq!(out.data(), &[f.get3(0, 0, 0), f.get3(1, 0, 0)]);
    }

    #[test]
    fn pool_passes_gradcheck() {
        let f = Tensor::from_fn(&[2, 6, 7], |i| ((i * 31) % 17) as f64 / 17.0 - 0.5);
        let op = BlockAveragePoolOp {
            roi: roi(0.7, -0.4, 5.3, 4.2),
            grid: GridSize::new(3, 2),
        };
        let r = check_vjp(&op, &[f], &GradCheckConfig::default()).unwrap();
        assert!(r.passed, "{r:?}");
    }

    proptest! {
        #[test]
        fn grid_respects_budget(
            x0 in -10.0f64..50.0, y0 in -10.0f64..50.0,
            w in 0.01f64..80.0, h in 0.01f64..80.0, budget in 1usize..300,
        ) {
            let g = dynamic_grid_size(&roi(x0, y0, x0 + w, y0 + h), budget).unwrap();
            prop_assert!(g.h >= 1 && g.w >= 1 && g.area() <= budget);
        }

        #[test]
        fn pool_is_convex(seed in 0u64..1000, x0 in -3.0f64..6.0, y0 in -3.0f64..6.0,
                          w in 0.1f64..8.0, h in 0.1f64..8.0, gh in 1usize..6, gw in 1usize..6) {
            let f = Tensor::from_fn(&[2, 6, 6], |i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 100.0 - 5.0);
            let out = block_average_pool(&f, &roi(x0, y0, x0 + w, y0 + h), GridSize::new(gh, gw)).unwrap();
            for c in 0..2 {
                let plane = &f.data()[c * 36..(c + 1) * 36];
                let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for v in &out.data()[c * gh * gw..(c + 1) * gh * gw] {
                    prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                }
            }
        }

        // Transposition symmetry holds whenever the box ratio is a small
        // rational p/q: both orientations reach error 0 and the area
        // tie-break picks the same multiple.
        #[test]
        fn exact_ratio_boxes_transpose(p in 1usize..9, q in 1usize..9, e in -2i32..4, budget in 1usize..260) {
            prop_assume!(budget >= p * q);
            let s = 2f64.powi(e);
            let b = roi(0.0, 0.0, q as f64 * s, p as f64 * s);
            let g = dynamic_grid_size(&b, budget).unwrap();
            let gt = dynamic_grid_size(&b.transposed(), budget).unwrap();
            prop_assert_eq!(gt, g.transposed());
        }
    }
}
