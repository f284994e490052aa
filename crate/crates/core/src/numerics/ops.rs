//! Forward kernels and their hand-written vector-Jacobian products.
//!
//! Every `*_backward` takes the forward inputs (and, where cheaper, the
//! forward output) plus the output cotangent and returns input cotangents.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Result, SraError};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    /// `(out_dim, in_dim)`
    pub weight: Tensor,
    /// `(out_dim)`
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match (weight.dims(), bias.dims()) {
            ([out, _], [b]) if out == b => Ok(LinearParams { weight, bias }),
            (w, b) => Err(SraError::shape(
                "linear params",
                "weight (out,in) with bias (out)",
                format!("weight {w:?}, bias {b:?}"),
            )),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let weight = Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 });
        LinearParams {
            weight,
            bias: Tensor::zeros(&[dim]),
        }
    }

    /// Fan-in uniform init: weights in `±1/sqrt(in_dim)`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        LinearParams {
            weight: Tensor::from_fn(&[out_dim, in_dim], |_| rng.gen_range(-bound..bound)),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Splits `x` into `(rows, width)` where `x` is `(width)` or `(rows, width)`.
fn rows_of(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match x.dims() {
        [w] => Ok((1, *w)),
        [r, w] => Ok((*r, *w)),
        d => Err(SraError::shape(op, "(dim) or (batch, dim)", format!("{d:?}"))),
    }
}

fn out_dims_like(x: &Tensor, width: usize) -> Vec<usize> {
    match x.dims() {
        [_] => vec![width],
        [r, _] => vec![*r, width],
        _ => unreachable!("checked by rows_of"),
    }
}

pub fn linear(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    let (rows, width) = rows_of(x, "linear")?;
    let (out_dim, in_dim) = (p.out_dim(), p.in_dim());
    if width != in_dim {
        return Err(SraError::shape(
            "linear",
            format!("input dim {in_dim}"),
            format!("input dim {width}"),
        ));
    }
    let w = p.weight.data();
    let b = p.bias.data();
    let xs = x.data();
    let mut out = Vec::with_capacity(rows * out_dim);
    for r in 0..rows {
        let xr = &xs[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            out.push(b[o] + wr.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>());
        }
    }
    Tensor::new(out_dims_like(x, out_dim), out)
}

pub fn linear_backward(x: &Tensor, p: &LinearParams, dy: &Tensor) -> Result<LinearGrads> {
    let (rows, in_dim) = rows_of(x, "linear_backward")?;
    let out_dim = p.out_dim();
    if dy.len() != rows * out_dim {
        return Err(SraError::shape(
            "linear_backward",
            format!("cotangent with {} elements", rows * out_dim),
            format!("{:?}", dy.dims()),
        ));
    }
    let w = p.weight.data();
    let xs = x.data();
    let g = dy.data();
    let mut dx = vec![0.0; rows * in_dim];
    let mut dw = vec![0.0; out_dim * in_dim];
    let mut db = vec![0.0; out_dim];
    for r in 0..rows {
        let xr = &xs[r * in_dim..(r + 1) * in_dim];
        let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let go = g[r * out_dim + o];
            if go == 0.0 {
                continue;
            }
            db[o] += go;
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            let dwr = &mut dw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dxr[i] += go * wr[i];
                dwr[i] += go * xr[i];
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(x.dims().to_vec(), dx)?,
        weight: Tensor::new(vec![out_dim, in_dim], dw)?,
        bias: Tensor::new(vec![out_dim], db)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub shift: Tensor,
    pub epsilon: f64,
}

pub const LAYER_NORM_EPSILON: f64 = 1e-5;

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        LayerNormParams {
            gain: Tensor::filled(&[dim], 1.0),
            shift: Tensor::zeros(&[dim]),
            epsilon: LAYER_NORM_EPSILON,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    pub fn param_count(&self) -> usize {
        self.gain.len() + self.shift.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormGrads {
    pub input: Tensor,
    pub gain: Tensor,
    pub shift: Tensor,
}

fn check_norm(x: &Tensor, p: &LayerNormParams, op: &'static str) -> Result<(usize, usize)> {
    let (rows, dim) = rows_of(x, op)?;
    if dim != p.dim() {
        return Err(SraError::shape(op, format!("feature dim {}", p.dim()), format!("feature dim {dim}")));
    }
    if p.epsilon.is_nan() || p.epsilon <= 0.0 {
        return Err(SraError::Config(format!("layer norm epsilon must be positive, got {}", p.epsilon)));
    }
    Ok((rows, dim))
}

/// Mean and `1/sqrt(var + eps)` of one row, population variance.
fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Normalizes each row of `x` over its last dimension.
pub fn layer_norm(x: &Tensor, p: &LayerNormParams) -> Result<Tensor> {
    let (rows, dim) = check_norm(x, p, "layer_norm")?;
    let (g, s) = (p.gain.data(), p.shift.data());
    let mut out = Vec::with_capacity(rows * dim);
    for row in x.data().chunks(dim) {
        let (mean, inv_std) = row_stats(row, p.epsilon);
        out.extend(row.iter().enumerate().map(|(i, v)| g[i] * (v - mean) * inv_std + s[i]));
    }
    Tensor::new(x.dims().to_vec(), out)
}

pub fn layer_norm_backward(x: &Tensor, p: &LayerNormParams, dy: &Tensor) -> Result<LayerNormGrads> {
    let (_, dim) = check_norm(x, p, "layer_norm_backward")?;
    if dy.len() != x.len() {
        return Err(SraError::shape("layer_norm_backward", format!("{:?}", x.dims()), format!("{:?}", dy.dims())));
    }
    let g = p.gain.data();
    let n = dim as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgain = vec![0.0; dim];
    let mut dshift = vec![0.0; dim];
    let mut xhat = vec![0.0; dim];
    let mut dxhat = vec![0.0; dim];
    for (r, row) in x.data().chunks(dim).enumerate() {
        let (mean, inv_std) = row_stats(row, p.epsilon);
        let dyr = &dy.data()[r * dim..(r + 1) * dim];
        for i in 0..dim {
            xhat[i] = (row[i] - mean) * inv_std;
            dxhat[i] = dyr[i] * g[i];
            dgain[i] += dyr[i] * xhat[i];
            dshift[i] += dyr[i];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        for i in 0..dim {
            dx[r * dim + i] = inv_std * (dxhat[i] - mean_d - xhat[i] * mean_dx);
        }
    }
    Ok(LayerNormGrads {
        input: Tensor::new(x.dims().to_vec(), dx)?,
        gain: Tensor::new(vec![dim], dgain)?,
        shift: Tensor::new(vec![dim], dshift)?,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
        if *v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Softmax over the two trailing (spatial) axes of `(N, h, w)` logits,
/// with logits multiplied by `gamma` before max-subtraction.
pub fn softmax_spatial(logits: &Tensor, gamma: f64) -> Result<Tensor> {
    let (_, h, w) = logits.dims3("softmax_spatial")?;
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(SraError::Config(format!("gamma must be positive and finite, got {gamma}")));
    }
    let mut out = logits.clone();
    for slice in out.data_mut().chunks_mut(h * w) {
        let z = slice.iter().fold(f64::NEG_INFINITY, |m, v| m.max(gamma * v));
        let mut total = 0.0;
        for v in slice.iter_mut() {
            *v = (gamma * *v - z).exp();
            total += *v;
        }
        slice.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// VJP of [`softmax_spatial`] given its output `m`:
/// `dlogits = gamma * m * (dy - sum(m * dy))` per slice.
pub fn softmax_spatial_backward(m: &Tensor, gamma: f64, dy: &Tensor) -> Result<Tensor> {
    let (_, h, w) = m.dims3("softmax_spatial_backward")?;
    if dy.dims() != m.dims() {
        return Err(SraError::shape("softmax_spatial_backward", format!("{:?}", m.dims()), format!("{:?}", dy.dims())));
    }
    let mut dl = Vec::with_capacity(m.len());
    for (ms, gs) in m.data().chunks(h * w).zip(dy.data().chunks(h * w)) {
        let inner: f64 = ms.iter().zip(gs).map(|(a, b)| a * b).sum();
        dl.extend(ms.iter().zip(gs).map(|(a, b)| gamma * a * (b - inner)));
    }
    Tensor::new(m.dims().to_vec(), dl)
}

/// The four `(flat spatial index, weight)` taps of a bilinear sample at
/// continuous `(y, x)` on an `h x w` grid. Pixel `(j, k)` sits at coordinate
/// `(j, k)`; coordinates outside the map are clamped to its border.
pub fn bilinear_taps(h: usize, w: usize, y: f64, x: f64) -> [(usize, f64); 4] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    [
        (y0 * w + x0, (1.0 - ly) * (1.0 - lx)),
        (y0 * w + x1, (1.0 - ly) * lx),
        (y1 * w + x0, ly * (1.0 - lx)),
        (y1 * w + x1, ly * lx),
    ]
}

pub fn bilinear_sample(f: &Tensor, y: f64, x: f64) -> Result<Tensor> {
    let (c, h, w) = f.dims3("bilinear_sample")?;
    let taps = bilinear_taps(h, w, y, x);
    let plane = h * w;
    let out = (0..c)
        .map(|ch| taps.iter().map(|&(i, wt)| wt * f.data()[ch * plane + i]).sum())
        .collect();
    Tensor::new(vec![c], out)
}

/// Scatters the `(C)` cotangent back onto a `(C, H, W)` map.
pub fn bilinear_sample_backward(dims: &[usize], y: f64, x: f64, dy: &Tensor) -> Result<Tensor> {
    let [c, h, w] = dims[..] else {
        return Err(SraError::shape("bilinear_sample_backward", "rank-3 dims", format!("{dims:?}")));
    };
    if dy.len() != c {
        return Err(SraError::shape("bilinear_sample_backward", format!("({c})"), format!("{:?}", dy.dims())));
    }
    let mut df = Tensor::zeros(dims);
    for (i, wt) in bilinear_taps(h, w, y, x) {
        for ch in 0..c {
            df.data_mut()[ch * h * w + i] += wt * dy.data()[ch];
        }
    }
    Ok(df)
}

/// `(C, h, w)` -> `(h*w, C)`: one row per spatial position.
pub fn to_rows(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3("to_rows")?;
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for pos in 0..plane {
            out[pos * c + ch] = x.data()[ch * plane + pos];
        }
    }
    Tensor::new(vec![plane, c], out)
}

/// `(h*w, C)` -> `(C, h, w)`; inverse of [`to_rows`].
pub fn from_rows(rows: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (plane, c) = match rows.dims() {
        [p, c] if *p == h * w => (*p, *c),
        d => return Err(SraError::shape("from_rows", format!("({}, C)", h * w), format!("{d:?}"))),
    };
    let mut out = vec![0.0; rows.len()];
    for pos in 0..plane {
        for ch in 0..c {
            out[ch * plane + pos] = rows.data()[pos * c + ch];
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// 1x1 convolution: the same linear map applied at every spatial position.
pub fn pointwise_linear(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    let (c, h, w) = x.dims3("pointwise_linear")?;
    if c != p.in_dim() {
        return Err(SraError::shape(
            "pointwise_linear",
            format!("{} input channels", p.in_dim()),
            format!("{c} input channels"),
        ));
    }
    from_rows(&linear(&to_rows(x)?, p)?, h, w)
}

pub fn pointwise_linear_backward(x: &Tensor, p: &LinearParams, dy: &Tensor) -> Result<LinearGrads> {
    let (_, h, w) = x.dims3("pointwise_linear_backward")?;
    let g = linear_backward(&to_rows(x)?, p, &to_rows(dy)?)?;
    Ok(LinearGrads {
        input: from_rows(&g.input, h, w)?,
        weight: g.weight,
        bias: g.bias,
    })
}
