//! Reference extractors: quantized RoI Pooling and RoI Align.

use crate::error::{Result, SraError};
use crate::numerics::{DiffOp, Tensor};
use crate::sampler::{GridSize, PoolPlan, RoiBox};

pub const DEFAULT_OUTPUT: GridSize = GridSize { h: 7, w: 7 };

/// `(out_h, out_w, C)` feature of a fixed-grid extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFeature(pub Tensor);

impl GridFeature {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// `(C, h, w)` -> `(h, w, C)`.
fn channels_last(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.dims3("channels_last")?;
    let plane = h * w;
    let mut out = vec![0.0; t.len()];
    for ch in 0..c {
        for pos in 0..plane {
            out[pos * c + ch] = t.data()[ch * plane + pos];
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// `(h, w, C)` -> `(C, h, w)`.
fn channels_first(t: &Tensor) -> Result<Tensor> {
    let (h, w, c) = t.dims3("channels_first")?;
    let plane = h * w;
    let mut out = vec![0.0; t.len()];
    for pos in 0..plane {
        for ch in 0..c {
            out[ch * plane + pos] = t.data()[pos * c + ch];
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Pixel range `[start, end)` of bin `b` along one axis, or the nearest
/// pixel when the quantized bin is empty.
fn quantized_bin(lo: f64, hi: f64, bins: usize, b: usize, size: usize) -> (usize, usize) {
    let start = lo.round();
    let extent = (hi.round() - start + 1.0).max(1.0);
    let bin = extent / bins as f64;
    let s = (start + (b as f64 * bin).floor()).clamp(0.0, size as f64) as usize;
    let e = (start + ((b + 1) as f64 * bin).ceil()).clamp(0.0, size as f64) as usize;
    if e > s {
        (s, e)
    } else {
        let center = (start + (b as f64 + 0.5) * bin - 0.5).round().clamp(0.0, (size - 1) as f64) as usize;
        (center, center + 1)
    }
}

/// Max over the integer pixels of each quantized bin.
pub fn roi_pool(map: &Tensor, roi: &RoiBox, out: GridSize) -> Result<GridFeature> {
    let (c, hh, ww) = map.dims3("roi_pool")?;
    roi.validate()?;
    if out.h == 0 || out.w == 0 {
        return Err(SraError::Config(format!("empty output grid {out:?}")));
    }
    let mut data = Vec::with_capacity(out.area() * c);
    for a in 0..out.h {
        let (ys, ye) = quantized_bin(roi.y0, roi.y1, out.h, a, hh);
        for b in 0..out.w {
            let (xs, xe) = quantized_bin(roi.x0, roi.x1, out.w, b, ww);
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                for y in ys..ye {
                    for x in xs..xe {
                        best = best.max(map.get3(ch, y, x));
                    }
                }
                data.push(best);
            }
        }
    }
    Ok(GridFeature(Tensor::new(vec![out.h, out.w, c], data)?))
}

/// Average of 2x2 bilinear samples at the quarter points of each bin; the
/// same kernel as the dynamic sampler's block pooling.
pub fn roi_align(map: &Tensor, roi: &RoiBox, out: GridSize) -> Result<GridFeature> {
    let pooled = PoolPlan::new(map.dims(), roi, out)?.apply(map)?;
    Ok(GridFeature(channels_last(&pooled)?))
}

/// Cotangent of [`roi_align`] with respect to the feature map.
pub fn roi_align_backward(map_dims: &[usize], roi: &RoiBox, out: GridSize, dy: &Tensor) -> Result<Tensor> {
    PoolPlan::new(map_dims, roi, out)?.apply_adjoint(map_dims, &channels_first(dy)?)
}

/// Inputs: `[feature_map]`.
pub struct RoiAlignOp {
    pub roi: RoiBox,
    pub out: GridSize,
}

impl DiffOp for RoiAlignOp {
    fn name(&self) -> &'static str {
        "roi_align"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Ok(roi_align(&inputs[0], &self.roi, self.out)?.into_tensor())
    }

    fn vjp(&self, inputs: &[Tensor], _output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![roi_align_backward(inputs[0].dims(), &self.roi, self.out, cotangent)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_vjp, GradCheckConfig};
    use crate::sampler::{block_average_pool, dynamic_grid_size};

    fn roi(x0: f64, y0: f64, x1: f64, y1: f64) -> RoiBox {
        RoiBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn constant_map_gives_constant_output() {
        let f = Tensor::filled(&[3, 10, 12], -1.25);
        let b = roi(1.3, 2.2, 9.7, 8.1);
        for out in [roi_pool(&f, &b, DEFAULT_OUTPUT).unwrap(), roi_align(&f, &b, DEFAULT_OUTPUT).unwrap()] {
            assert_eq!(out.tensor().dims(), &[7, 7, 3]);
            assert!(out.tensor().data().iter().all(|v| (v + 1.25).abs() < 1e-14));
        }
    }

    #[test]
    fn single_pixel_box_replicates_pixel() {
        let f = Tensor::from_fn(&[2, 6, 6], |i| i as f64);
        let out = roi_pool(&f, &roi(2.1, 3.9, 2.4, 4.2), DEFAULT_OUTPUT).unwrap();
        for cell in out.tensor().data().chunks(2) {
            assert_eq!(cell, &[f.get3(0, 4, 2), f.get3(1, 4, 2)]);
        }
    }

    #[test]
    fn roi_pool_outputs_are_map_elements() {
        let f = Tensor::from_fn(&[2, 9, 9], |i| ((i * 7919) % 101) as f64 - 50.0);
        let out = roi_pool(&f, &roi(-2.0, 0.4, 7.6, 11.0), GridSize::new(3, 5)).unwrap();
        for v in out.tensor().data() {
            assert!(f.data().contains(v));
        }
    }

    #[test]
    fn roi_align_on_linear_ramp_hits_bin_centers() {
        let f = Tensor::from_fn(&[1, 12, 12], |i| (i % 12) as f64 + 2.0 * (i / 12) as f64);
        let b = roi(1.5, 2.25, 9.0, 10.5);
        let out = roi_align(&f, &b, DEFAULT_OUTPUT).unwrap();
        let (bh, bw) = (b.height() / 7.0, b.width() / 7.0);
        for a in 0..7 {
            for c in 0..7 {
                let y = b.y0 + (a as f64 + 0.5) * bh;
                let x = b.x0 + (c as f64 + 0.5) * bw;
                assert!((out.tensor().get3(a, c, 0) - (x + 2.0 * y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn roi_align_matches_block_pool_on_dynamic_grid() {
        let f = Tensor::from_fn(&[3, 10, 10], |i| ((i * 31) % 23) as f64);
        let b = roi(0.5, 1.0, 8.0, 4.0);
        let g = dynamic_grid_size(&b, 32).unwrap();
        let pooled = block_average_pool(&f, &b, g).unwrap();
        let aligned = roi_align(&f, &b, g).unwrap();
        assert_eq!(channels_first(aligned.tensor()).unwrap(), pooled);
    }

    #[test]
    fn roi_align_gradcheck() {
        let f = Tensor::from_fn(&[2, 8, 8], |i| ((i * 13) % 7) as f64 * 0.3 - 1.0);
        let op = RoiAlignOp {
            roi: roi(0.6, 1.1, 6.2, 5.9),
            out: GridSize::new(3, 3),
        };
        let r = check_vjp(&op, &[f], &GradCheckConfig::default()).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
