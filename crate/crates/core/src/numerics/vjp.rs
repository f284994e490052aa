//! Uniform differentiable-op interface and the finite-difference checker.

use std::sync::Arc;

use rand::Rng as _;
use serde::Serialize;

use super::ops::{self, LayerNormParams, LinearParams};
use super::Tensor;
use crate::error::{Result, SraError};
use crate::rng;

/// An operation with a forward map and its vector-Jacobian product.
///
/// Learnable parameters are passed as ordinary inputs so the checker can
/// perturb them; each implementation documents its input order.
pub trait DiffOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;

    /// One cotangent per input, shaped like that input.
    fn vjp(&self, inputs: &[Tensor], output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>>;
}

/// Forward activations kept for a later backward pass.
pub struct VjpRecord {
    op: Arc<dyn DiffOp>,
    inputs: Vec<Tensor>,
    output: Tensor,
}

impl VjpRecord {
    pub fn op_name(&self) -> &'static str {
        self.op.name()
    }

    pub fn output(&self) -> &Tensor {
        &self.output
    }

    pub fn apply(&self, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        if cotangent.dims() != self.output.dims() {
            return Err(SraError::shape(
                "vjp",
                format!("cotangent {:?}", self.output.dims()),
                format!("{:?}", cotangent.dims()),
            ));
        }
        self.op.vjp(&self.inputs, &self.output, cotangent)
    }
}

/// Runs `op` forward and keeps what its backward pass needs.
pub fn record(op: Arc<dyn DiffOp>, inputs: Vec<Tensor>) -> Result<(Tensor, VjpRecord)> {
    let output = op.forward(&inputs)?;
    Ok((
        output.clone(),
        VjpRecord {
            op,
            inputs,
            output,
        },
    ))
}

fn expect_inputs(op: &'static str, inputs: &[Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(SraError::Usage(format!("{op} takes {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

fn linear_params(op: &'static str, w: &Tensor, b: &Tensor) -> Result<LinearParams> {
    LinearParams::new(w.clone(), b.clone()).map_err(|_| {
        SraError::shape(op, "weight (out,in) and bias (out)", format!("{:?} / {:?}", w.dims(), b.dims()))
    })
}

/// Inputs: `[x, weight, bias]`.
pub struct LinearOp;

impl DiffOp for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        expect_inputs("linear", inputs, 3)?;
        ops::linear(&inputs[0], &linear_params("linear", &inputs[1], &inputs[2])?)
    }

    fn vjp(&self, inputs: &[Tensor], _output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        let g = ops::linear_backward(&inputs[0], &linear_params("linear", &inputs[1], &inputs[2])?, cotangent)?;
        Ok(vec![g.input, g.weight, g.bias])
    }
}

/// Inputs: `[x, weight, bias]`, `x` shaped `(C, h, w)`.
pub struct PointwiseLinearOp;

impl DiffOp for PointwiseLinearOp {
    fn name(&self) -> &'static str {
        "pointwise_linear"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        expect_inputs("pointwise_linear", inputs, 3)?;
        ops::pointwise_linear(&inputs[0], &linear_params("pointwise_linear", &inputs[1], &inputs[2])?)
    }

    fn vjp(&self, inputs: &[Tensor], _output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        let p = linear_params("pointwise_linear", &inputs[1], &inputs[2])?;
        let g = ops::pointwise_linear_backward(&inputs[0], &p, cotangent)?;
        Ok(vec![g.input, g.weight, g.bias])
    }
}

/// Inputs: `[x, gain, shift]`.
pub struct LayerNormOp {
    pub epsilon: f64,
}

impl LayerNormOp {
    fn params(&self, inputs: &[Tensor]) -> LayerNormParams {
        LayerNormParams {
            gain: inputs[1].clone(),
            shift: inputs[2].clone(),
            epsilon: self.epsilon,
        }
    }
}

impl DiffOp for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        expect_inputs("layer_norm", inputs, 3)?;
        ops::layer_norm(&inputs[0], &self.params(inputs))
    }

    fn vjp(&self, inputs: &[Tensor], _output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        let g = ops::layer_norm_backward(&inputs[0], &self.params(inputs), cotangent)?;
        Ok(vec![g.input, g.gain, g.shift])
    }
}

/// Inputs: `[x]`.
pub struct ReluOp;

impl DiffOp for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        expect_inputs("relu", inputs, 1)?;
        Ok(ops::relu(&inputs[0]))
    }

    fn vjp(&self, inputs: &[Tensor], _output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![ops::relu_backward(&inputs[0], cotangent)])
    }
}

/// Inputs: `[logits]`, shaped `(N, h, w)`.
pub struct SoftmaxSpatialOp {
    pub gamma: f64,
}

impl DiffOp for SoftmaxSpatialOp {
    fn name(&self) -> &'static str {
        "softmax_spatial"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        expect_inputs("softmax_spatial", inputs, 1)?;
        ops::softmax_spatial(&inputs[0], self.gamma)
    }

    fn vjp(&self, _inputs: &[Tensor], output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![ops::softmax_spatial_backward(output, self.gamma, cotangent)?])
    }
}

/// Inputs: `[feature_map]`; the sample location is fixed.
pub struct BilinearSampleOp {
    pub y: f64,
    pub x: f64,
}

impl DiffOp for BilinearSampleOp {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        expect_inputs("bilinear_sample", inputs, 1)?;
        ops::bilinear_sample(&inputs[0], self.y, self.x)
    }

    fn vjp(&self, inputs: &[Tensor], _output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![ops::bilinear_sample_backward(inputs[0].dims(), self.y, self.x, cotangent)?])
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error `tolerance * floor`.
    pub scale_floor: f64,
    /// Largest extent allowed along any input axis.
    pub max_dim: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            scale_floor: 1e-3,
            max_dim: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorstCoordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VjpReport {
    pub op: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst: Option<WorstCoordinate>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares `op.vjp` against central finite differences of `<r, op(x)>`
/// for a random projection `r`, over every coordinate of every input.
pub fn check_vjp(op: &dyn DiffOp, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<VjpReport> {
    for (i, t) in inputs.iter().enumerate() {
        if let Some(&d) = t.dims().iter().find(|&&d| d > cfg.max_dim) {
            return Err(SraError::Usage(format!(
                "check_vjp input {i} has extent {d} > {} in dims {:?}",
                cfg.max_dim,
                t.dims()
            )));
        }
    }
    let output = op.forward(inputs)?;
    let mut rng = rng::stream(cfg.seed, "gradcheck.projection");
    let proj = Tensor::from_fn(output.dims(), |_| rng.gen_range(-1.0..1.0));
    let analytic = op.vjp(inputs, &output, &proj)?;
    if analytic.len() != inputs.len() {
        return Err(SraError::Usage(format!(
            "{} returned {} cotangents for {} inputs",
            op.name(),
            analytic.len(),
            inputs.len()
        )));
    }

    let mut probe = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut worst = None;
    let mut coordinates = 0;
    for i in 0..inputs.len() {
        if analytic[i].dims() != inputs[i].dims() {
            return Err(SraError::shape(op.name(), format!("cotangent {:?}", inputs[i].dims()), format!("{:?}", analytic[i].dims())));
        }
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + cfg.step;
            let plus = op.forward(&probe)?.dot(&proj);
            probe[i].data_mut()[k] = orig - cfg.step;
            let minus = op.forward(&probe)?.dot(&proj);
            probe[i].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[i].data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.scale_floor);
            coordinates += 1;
            max_abs = max_abs.max(abs);
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some(WorstCoordinate {
                    input: i,
                    index: k,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(VjpReport {
        op: op.name().to_string(),
        coordinates,
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        worst,
        tolerance: cfg.tolerance,
        passed: max_rel < cfg.tolerance,
    })
}
