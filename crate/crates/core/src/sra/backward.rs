use super::forward::{sample_roi_feature_backward, SraOutput, SraTape};
use super::{DescriptorMode, SraConfig, SraParams};
use crate::embeddings::project_embedding_backward;
use crate::error::{Result, SraError};
use crate::numerics::ops::{
    from_rows, layer_norm_backward, linear_backward, pointwise_linear_backward, relu_backward,
    softmax_spatial_backward,
};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default)]
pub struct BackwardOptions {
    /// Also return the gradient with respect to the full feature map.
    pub map_grad: bool,
    /// Treat the masks as constants: only the direct path of the weighted
    /// sum reaches the pooled map, and parameter gradients are zero.
    pub frozen_masks: bool,
}

#[derive(Clone, Debug)]
pub struct SraGrads {
    /// Same structure as the parameters.
    pub params: SraParams,
    /// `(C, h, w)` gradient with respect to the pooled map.
    pub pooled: Tensor,
    /// `(C, H, W)` gradient with respect to the feature map, when requested.
    pub map: Option<Tensor>,
}

pub(super) fn sra_backward(
    dy: &Tensor,
    output: &SraOutput,
    tape: &SraTape,
    params: &SraParams,
    config: &SraConfig,
    opts: BackwardOptions,
) -> Result<SraGrads> {
    let f = &tape.pooled;
    let m = &output.masks;
    let (c, h, w) = f.dims3("sra_backward")?;
    let plane = h * w;
    let k = config.descriptor_dim;

    let (mut df, dm) = sample_roi_feature_backward(f, m, dy)?;
    let mut grads = params.zeros_like();

    if !opts.frozen_masks {
        let dlogits = softmax_spatial_backward(m, config.gamma, &dm)?;

        // regressors, accumulating the cotangent of the shared input rows
        let z = tape.rows.dims()[1];
        let mut drows = Tensor::zeros(&[plane, z]);
        let mut first = 0;
        for ((r, rt), gr) in params.regressors.iter().zip(&tape.regressors).zip(grads.regressors.iter_mut()) {
            let width = r.outputs();
            let mut dout = vec![0.0; plane * width];
            for pos in 0..plane {
                for o in 0..width {
                    dout[pos * width + o] = dlogits.data()[(first + o) * plane + pos];
                }
            }
            first += width;
            let dout = Tensor::new(vec![plane, width], dout)?;

            let head = linear_backward(&rt.act2, &r.head_linear, &dout)?;
            let dnorm2 = relu_backward(&rt.norm2, &head.input);
            let hn = layer_norm_backward(&rt.hidden, &r.head_norm, &dnorm2)?;
            let trunk = linear_backward(&rt.act1, &r.trunk_linear, &hn.input)?;
            let dnorm1 = relu_backward(&rt.norm1, &trunk.input);
            let tn = layer_norm_backward(&tape.rows, &r.trunk_norm, &dnorm1)?;

            drows.add_scaled(&tn.input, 1.0);
            gr.head_linear.weight = head.weight;
            gr.head_linear.bias = head.bias;
            gr.head_norm.gain = hn.gain;
            gr.head_norm.shift = hn.shift;
            gr.trunk_linear.weight = trunk.weight;
            gr.trunk_linear.bias = trunk.bias;
            gr.trunk_norm.gain = tn.gain;
            gr.trunk_norm.shift = tn.shift;
        }

        // split [d, s, p] back apart
        let pd = z - 2 * k;
        let mut dd = vec![0.0; k];
        let mut ds_rows = vec![0.0; plane * k];
        let mut dp_rows = vec![0.0; plane * pd];
        for pos in 0..plane {
            let row = &drows.data()[pos * z..(pos + 1) * z];
            for i in 0..k {
                dd[i] += row[i];
            }
            ds_rows[pos * k..(pos + 1) * k].copy_from_slice(&row[k..2 * k]);
            dp_rows[pos * pd..(pos + 1) * pd].copy_from_slice(&row[2 * k..]);
        }

        let ds = from_rows(&Tensor::new(vec![plane, k], ds_rows)?, h, w)?;
        let sem = pointwise_linear_backward(f, &params.semantic_conv, &ds)?;
        df.add_scaled(&sem.input, 1.0);
        grads.semantic_conv.weight = sem.weight;
        grads.semantic_conv.bias = sem.bias;

        if pd > 0 {
            let (raw, proj) = match (&tape.raw_embedding, &params.embed_proj) {
                (Some(raw), Some(proj)) => (raw, proj),
                _ => return Err(SraError::Usage("tape lacks the embedding it was recorded with".into())),
            };
            let dp = from_rows(&Tensor::new(vec![plane, pd], dp_rows)?, h, w)?;
            let pg = project_embedding_backward(raw, proj, &dp)?;
            let gp = grads.embed_proj.as_mut().expect("structure mirrors params");
            gp.weight = pg.weight;
            gp.bias = pg.bias;
        }

        let psi = linear_backward(&tape.summary, &params.psi, &Tensor::from_vec(dd))?;
        grads.psi.weight = psi.weight;
        grads.psi.bias = psi.bias;
        let dsummary = psi.input;
        let dfd = df.data_mut();
        match config.descriptor {
            DescriptorMode::Average => {
                for ch in 0..c {
                    let g = dsummary.data()[ch] / plane as f64;
                    dfd[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v += g);
                }
            }
            DescriptorMode::Maximum => {
                let argmax = tape.argmax.as_ref().expect("maximum mode records argmax");
                for ch in 0..c {
                    dfd[ch * plane + argmax[ch]] += dsummary.data()[ch];
                }
            }
            DescriptorMode::Concatenation => {
                for (v, g) in dfd.iter_mut().zip(dsummary.data()) {
                    *v += g;
                }
            }
        }
    }

    let map = if opts.map_grad {
        let (dims, plan) = tape
            .map
            .as_ref()
            .ok_or_else(|| SraError::Usage("map gradient needs a forward pass from the feature map".into()))?;
        Some(plan.apply_adjoint(dims, &df)?)
    } else {
        None
    };

    Ok(SraGrads {
        params: grads,
        pooled: df,
        map,
    })
}
