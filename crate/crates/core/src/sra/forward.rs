use std::sync::Arc;

use super::{BackwardOptions, DescriptorMode, Regressor, SraConfig, SraGrads, SraParams};
use crate::embeddings::{project_embedding, raw_embedding};
use crate::error::{Result, SraError};
use crate::numerics::ops::{layer_norm, linear, pointwise_linear, relu, softmax_spatial};
use crate::numerics::{DiffOp, LinearParams, Tensor};
use crate::sampler::{GridSize, PoolPlan, RoiBox};

/// Pre-`psi` summary of the pooled map plus, for the maximum mode, the
/// flat spatial index that won each channel.
pub fn descriptor_input(f: &Tensor, mode: DescriptorMode) -> Result<(Tensor, Option<Vec<usize>>)> {
    let (c, h, w) = f.dims3("roi_descriptor")?;
    let plane = h * w;
    match mode {
        DescriptorMode::Concatenation => Ok((Tensor::from_vec(f.data().to_vec()), None)),
        DescriptorMode::Average => {
            let means = f.data().chunks(plane).map(|ch| ch.iter().sum::<f64>() / plane as f64).collect();
            Ok((Tensor::from_vec(means), None))
        }
        DescriptorMode::Maximum => {
            let mut vals = Vec::with_capacity(c);
            let mut idx = Vec::with_capacity(c);
            for ch in f.data().chunks(plane) {
                let (i, v) = ch
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
                vals.push(v);
                idx.push(i);
            }
            Ok((Tensor::from_vec(vals), Some(idx)))
        }
    }
}

/// `d = psi(summary(f))`, `(K)`.
pub fn roi_descriptor(f: &Tensor, mode: DescriptorMode, psi: &LinearParams) -> Result<Tensor> {
    let (summary, _) = descriptor_input(f, mode)?;
    if summary.len() != psi.in_dim() {
        return Err(SraError::shape(
            "roi_descriptor",
            format!("descriptor input {}", psi.in_dim()),
            format!("descriptor input {} ({mode:?} of {:?})", summary.len(), f.dims()),
        ));
    }
    linear(&summary, psi)
}

/// 1x1 convolution of the pooled map, `(K, h, w)`.
pub fn semantic_feature_map(f: &Tensor, conv: &LinearParams) -> Result<Tensor> {
    pointwise_linear(f, conv)
}

/// Per-position regressor input rows `[d, s(:,j,k), p(:,j,k)]`, `(h*w, Z)`.
fn regressor_rows(d: &Tensor, s: &Tensor, p: Option<&Tensor>) -> Result<Tensor> {
    let (k, h, w) = s.dims3("mask_logits")?;
    if d.len() != k {
        return Err(SraError::shape("mask_logits", format!("descriptor of {k}"), format!("descriptor of {}", d.len())));
    }
    let pd = match p {
        Some(p) => {
            let (pd, ph, pw) = p.dims3("mask_logits")?;
            if (ph, pw) != (h, w) {
                return Err(SraError::shape("mask_logits", format!("embedding grid {h}x{w}"), format!("{ph}x{pw}")));
            }
            pd
        }
        None => 0,
    };
    let z = 2 * k + pd;
    let plane = h * w;
    let mut rows = vec![0.0; plane * z];
    for pos in 0..plane {
        let row = &mut rows[pos * z..(pos + 1) * z];
        row[..k].copy_from_slice(d.data());
        for c in 0..k {
            row[k + c] = s.data()[c * plane + pos];
        }
        if let Some(p) = p {
            for c in 0..pd {
                row[2 * k + c] = p.data()[c * plane + pos];
            }
        }
    }
    Tensor::new(vec![plane, z], rows)
}

/// Activations of one regressor over all positions.
#[derive(Clone, Debug)]
pub(super) struct RegressorTape {
    pub norm1: Tensor,
    pub act1: Tensor,
    pub hidden: Tensor,
    pub norm2: Tensor,
    pub act2: Tensor,
}

fn run_regressor(r: &Regressor, rows: &Tensor) -> Result<(Tensor, RegressorTape)> {
    let norm1 = layer_norm(rows, &r.trunk_norm)?;
    let act1 = relu(&norm1);
    let hidden = linear(&act1, &r.trunk_linear)?;
    let norm2 = layer_norm(&hidden, &r.head_norm)?;
    let act2 = relu(&norm2);
    let out = linear(&act2, &r.head_linear)?;
    Ok((
        out,
        RegressorTape {
            norm1,
            act1,
            hidden,
            norm2,
            act2,
        },
    ))
}

fn logits_from_rows(rows: &Tensor, params: &SraParams, h: usize, w: usize) -> Result<(Tensor, Vec<RegressorTape>)> {
    let plane = h * w;
    let n = params.n_masks();
    let mut logits = vec![0.0; n * plane];
    let mut tapes = Vec::with_capacity(params.regressors.len());
    let mut first = 0;
    for r in &params.regressors {
        if r.trunk_norm.dim() != rows.dims()[1] {
            return Err(SraError::shape(
                "mask_logits",
                format!("regressor input {}", r.trunk_norm.dim()),
                format!("regressor input {}", rows.dims()[1]),
            ));
        }
        let (out, tape) = run_regressor(r, rows)?;
        let width = r.outputs();
        for pos in 0..plane {
            for o in 0..width {
                logits[(first + o) * plane + pos] = out.data()[pos * width + o];
            }
        }
        first += width;
        tapes.push(tape);
    }
    Ok((Tensor::new(vec![n, h, w], logits)?, tapes))
}

/// Pre-softmax mask scores `(N, h, w)`: the regressors applied to
/// `[d, s(:,j,k), p(:,j,k)]` independently at every position.
pub fn mask_logits(d: &Tensor, s: &Tensor, p: Option<&Tensor>, params: &SraParams) -> Result<Tensor> {
    let (_, h, w) = s.dims3("mask_logits")?;
    let rows = regressor_rows(d, s, p)?;
    Ok(logits_from_rows(&rows, params, h, w)?.0)
}

pub fn masks_from_logits(logits: &Tensor, gamma: f64) -> Result<Tensor> {
    softmax_spatial(logits, gamma)
}

/// `y(n, c) = sum_{j,k} f(c, j, k) * m(n, j, k)`, `(N, C)`.
pub fn sample_roi_feature(f: &Tensor, m: &Tensor) -> Result<Tensor> {
    let (c, h, w) = f.dims3("sample_roi_feature")?;
    let (n, mh, mw) = m.dims3("sample_roi_feature")?;
    if (h, w) != (mh, mw) {
        return Err(SraError::shape("sample_roi_feature", format!("masks over {h}x{w}"), format!("masks over {mh}x{mw}")));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * c);
    for mn in m.data().chunks(plane) {
        for fc in f.data().chunks(plane) {
            out.push(mn.iter().zip(fc).map(|(a, b)| a * b).sum());
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Cotangents `(df, dm)` of [`sample_roi_feature`].
pub fn sample_roi_feature_backward(f: &Tensor, m: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = f.dims3("sample_roi_feature_backward")?;
    let (n, _, _) = m.dims3("sample_roi_feature_backward")?;
    if dy.dims() != [n, c] {
        return Err(SraError::shape("sample_roi_feature_backward", format!("({n}, {c})"), format!("{:?}", dy.dims())));
    }
    let plane = h * w;
    let mut df = vec![0.0; c * plane];
    let mut dm = vec![0.0; n * plane];
    for ni in 0..n {
        let mn = &m.data()[ni * plane..(ni + 1) * plane];
        let dmn = &mut dm[ni * plane..(ni + 1) * plane];
        for ci in 0..c {
            let g = dy.data()[ni * c + ci];
            let fc = &f.data()[ci * plane..(ci + 1) * plane];
            let dfc = &mut df[ci * plane..(ci + 1) * plane];
            for p in 0..plane {
                dmn[p] += g * fc[p];
                dfc[p] += g * mn[p];
            }
        }
    }
    Ok((Tensor::new(vec![c, h, w], df)?, Tensor::new(vec![n, h, w], dm)?))
}

#[derive(Clone, Debug)]
pub struct SraOutput {
    /// `(N, C)` RoI feature.
    pub feature: Tensor,
    /// `(N, h, w)` semantic masks.
    pub masks: Tensor,
    pub grid: GridSize,
}

/// Everything the backward pass reads.
#[derive(Clone, Debug)]
pub struct SraTape {
    pub(super) map: Option<(Vec<usize>, PoolPlan)>,
    pub(super) pooled: Tensor,
    pub(super) summary: Tensor,
    pub(super) argmax: Option<Vec<usize>>,
    pub(super) raw_embedding: Option<Arc<Tensor>>,
    pub(super) rows: Tensor,
    pub(super) regressors: Vec<RegressorTape>,
}

impl SraTape {
    pub fn pooled(&self) -> &Tensor {
        &self.pooled
    }
}

/// Result of a forward pass; carries a tape when gradients were requested.
#[derive(Clone, Debug)]
pub struct SraForward {
    pub output: SraOutput,
    pub tape: Option<SraTape>,
}

impl SraForward {
    pub fn backward(&self, cotangent: &Tensor, params: &SraParams, config: &SraConfig, opts: BackwardOptions) -> Result<SraGrads> {
        let tape = self
            .tape
            .as_ref()
            .ok_or_else(|| SraError::Usage("backward needs a forward pass run with gradient recording".into()))?;
        super::backward::sra_backward(cotangent, &self.output, tape, params, config, opts)
    }
}

fn check_params(params: &SraParams, config: &SraConfig, channels: usize, grid: GridSize) -> Result<()> {
    config.validate()?;
    if params.channels() != channels {
        return Err(SraError::shape("sra", format!("{} channels", params.channels()), format!("{channels} channels")));
    }
    if config.descriptor == DescriptorMode::Concatenation && params.psi.in_dim() != channels * grid.area() {
        return Err(SraError::Config(format!(
            "concatenation descriptor sized for {} inputs cannot take a {}x{} grid",
            params.psi.in_dim(),
            grid.h,
            grid.w
        )));
    }
    if params.n_masks() != config.n_masks {
        return Err(SraError::Config(format!("params have {} masks, config {}", params.n_masks(), config.n_masks)));
    }
    match (&params.embed_proj, config.embedding.raw_depth(config.budget)) {
        (None, 0) => {}
        (Some(p), d) if p.in_dim() == d && p.out_dim() == config.embed_dim => {}
        _ => return Err(SraError::Config("embedding projection does not match the configured embedding".into())),
    }
    Ok(())
}

/// Forward pass from an already pooled `(C, h, w)` map.
///
/// `raw_embedding` may be supplied from a cache; it is computed otherwise.
pub fn sra_forward_pooled(
    pooled: Tensor,
    params: &SraParams,
    config: &SraConfig,
    raw: Option<Arc<Tensor>>,
    record: bool,
) -> Result<SraForward> {
    let (c, h, w) = pooled.dims3("sra")?;
    let grid = GridSize::new(h, w);
    check_params(params, config, c, grid)?;

    let (summary, argmax) = descriptor_input(&pooled, config.descriptor)?;
    let d = linear(&summary, &params.psi)?;
    let s = semantic_feature_map(&pooled, &params.semantic_conv)?;
    let raw = match raw {
        Some(r) => Some(r),
        None => raw_embedding(config.embedding, grid, config.budget)?.map(Arc::new),
    };
    let p = match (&raw, &params.embed_proj) {
        (Some(r), Some(proj)) => Some(project_embedding(r, proj)?),
        _ => None,
    };
    let rows = regressor_rows(&d, &s, p.as_ref())?;
    let (logits, regressors) = logits_from_rows(&rows, params, h, w)?;
    let masks = masks_from_logits(&logits, config.gamma)?;
    let feature = sample_roi_feature(&pooled, &masks)?;

    let output = SraOutput { feature, masks, grid };
    let tape = record.then_some(SraTape {
        map: None,
        pooled,
        summary,
        argmax,
        raw_embedding: raw,
        rows,
        regressors,
    });
    Ok(SraForward { output, tape })
}

/// Full forward pass from the feature map and a box.
pub fn sra_forward(map: &Tensor, roi: &RoiBox, params: &SraParams, config: &SraConfig, record: bool) -> Result<SraForward> {
    let grid = config.grid_for(roi)?;
    let plan = PoolPlan::new(map.dims(), roi, grid)?;
    let pooled = plan.apply(map)?;
    let mut fwd = sra_forward_pooled(pooled, params, config, None, record)?;
    if let Some(tape) = &mut fwd.tape {
        tape.map = Some((map.dims().to_vec(), plan));
    }
    Ok(fwd)
}

/// RoI feature, masks and grid for one box.
pub fn sra_extract(map: &Tensor, roi: &RoiBox, params: &SraParams, config: &SraConfig) -> Result<SraOutput> {
    Ok(sra_forward(map, roi, params, config, false)?.output)
}

/// Inputs: `[f, m]`.
pub struct SampleRoiFeatureOp;

impl DiffOp for SampleRoiFeatureOp {
    fn name(&self) -> &'static str {
        "sample_roi_feature"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        sample_roi_feature(&inputs[0], &inputs[1])
    }

    fn vjp(&self, inputs: &[Tensor], _output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        let (df, dm) = sample_roi_feature_backward(&inputs[0], &inputs[1], cotangent)?;
        Ok(vec![df, dm])
    }
}

/// The whole extractor as one differentiable op.
///
/// Inputs: `[feature_map, <every tensor of the template params in
/// SraParams::tensors order>]`.
pub struct SraPipelineOp {
    pub roi: RoiBox,
    pub config: SraConfig,
    pub template: SraParams,
}

impl SraPipelineOp {
    pub fn inputs(&self, map: &Tensor) -> Vec<Tensor> {
        std::iter::once(map.clone())
            .chain(self.template.tensors().into_iter().map(|(_, t)| t.clone()))
            .collect()
    }
}

impl DiffOp for SraPipelineOp {
    fn name(&self) -> &'static str {
        "sra_pipeline"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let params = self.template.with_tensors(&inputs[1..])?;
        Ok(sra_extract(&inputs[0], &self.roi, &params, &self.config)?.feature)
    }

    fn vjp(&self, inputs: &[Tensor], _output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        let params = self.template.with_tensors(&inputs[1..])?;
        let fwd = sra_forward(&inputs[0], &self.roi, &params, &self.config, true)?;
        let opts = BackwardOptions {
            map_grad: true,
            ..Default::default()
        };
        let grads = fwd.backward(cotangent, &params, &self.config, opts)?;
        let mut out = vec![grads.map.expect("map gradient requested")];
        out.extend(grads.params.tensors().into_iter().map(|(_, t)| t.clone()));
        Ok(out)
    }
}
