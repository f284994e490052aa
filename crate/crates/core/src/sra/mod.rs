//! Semantic RoI Align: descriptor, semantic map, mask regression, amplified
//! spatial softmax and mask-weighted sampling, with a hand-written backward
//! pass and parameter accounting.

mod backward;
pub mod checkpoint;
mod forward;
#[cfg(test)]
mod pipeline_tests;

use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingMode;
use crate::error::{Result, SraError};
use crate::numerics::{LayerNormParams, LinearParams, Tensor};
use crate::rng::Rng;
use crate::sampler::{dynamic_grid_size, GridSize, RoiBox};

pub use backward::{BackwardOptions, SraGrads};
pub use forward::{
    descriptor_input, mask_logits, masks_from_logits, roi_descriptor, sample_roi_feature,
    sample_roi_feature_backward, semantic_feature_map, sra_extract, sra_forward, sra_forward_pooled,
    SampleRoiFeatureOp, SraForward, SraOutput, SraPipelineOp, SraTape,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorMode {
    Concatenation,
    Maximum,
    #[default]
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SraConfig {
    /// Number of semantic masks, i.e. rows of the output feature.
    pub n_masks: usize,
    /// Area budget of the dynamic sampler; also the per-axis length of the
    /// Area Embedding.
    pub budget: usize,
    /// Width of the RoI descriptor and of the semantic feature map.
    pub descriptor_dim: usize,
    /// Channels of the projected embedding.
    pub embed_dim: usize,
    /// Logit amplification applied before the spatial softmax.
    pub gamma: f64,
    /// Width of the regressor trunk.
    pub hidden: usize,
    pub descriptor: DescriptorMode,
    pub embedding: EmbeddingMode,
    /// Replaces the dynamic grid when set.
    pub fixed_grid: Option<GridSize>,
    /// One regressor per mask instead of a shared trunk with an N-way head.
    pub independent_heads: bool,
}

impl Default for SraConfig {
    fn default() -> Self {
        SraConfig {
            n_masks: 49,
            budget: 128,
            descriptor_dim: 256,
            embed_dim: 32,
            gamma: 50.0,
            hidden: 128,
            descriptor: DescriptorMode::Average,
            embedding: EmbeddingMode::Area,
            fixed_grid: None,
            independent_heads: false,
        }
    }
}

impl SraConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SraError::Config(msg));
        if self.n_masks == 0 || self.descriptor_dim == 0 || self.hidden == 0 || self.budget == 0 {
            return bad(format!(
                "n_masks, descriptor_dim, hidden and budget must be >= 1 (got {}, {}, {}, {})",
                self.n_masks, self.descriptor_dim, self.hidden, self.budget
            ));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.embedding != EmbeddingMode::None && self.embed_dim == 0 {
            return bad("embed_dim must be >= 1 when an embedding is enabled".into());
        }
        if let Some(g) = self.fixed_grid {
            if g.h == 0 || g.w == 0 {
                return bad(format!("fixed grid {g:?} is empty"));
            }
            if self.embedding == EmbeddingMode::Area && (g.h > self.budget || g.w > self.budget) {
                return bad(format!("fixed grid {g:?} exceeds the area embedding length {}", self.budget));
            }
        } else if self.descriptor == DescriptorMode::Concatenation {
            return bad("concatenation descriptor needs a fixed grid; it cannot follow a dynamic grid".into());
        }
        Ok(())
    }

    pub fn grid_for(&self, roi: &RoiBox) -> Result<GridSize> {
        match self.fixed_grid {
            Some(g) => Ok(g),
            None => dynamic_grid_size(roi, self.budget),
        }
    }

    /// Active embedding channels (0 when disabled).
    pub fn active_embed_dim(&self) -> usize {
        if self.embedding == EmbeddingMode::None {
            0
        } else {
            self.embed_dim
        }
    }

    /// Width of the per-position regressor input `[d, s, p]`.
    pub fn regressor_input_dim(&self) -> usize {
        2 * self.descriptor_dim + self.active_embed_dim()
    }

    pub fn descriptor_input_dim(&self, channels: usize) -> usize {
        match (self.descriptor, self.fixed_grid) {
            (DescriptorMode::Concatenation, Some(g)) => channels * g.area(),
            _ => channels,
        }
    }

    /// `(regressor count, outputs per regressor)`.
    pub fn regressor_layout(&self) -> (usize, usize) {
        if self.independent_heads {
            (self.n_masks, 1)
        } else {
            (1, self.n_masks)
        }
    }
}

/// Two Norm-ReLU-Linear blocks applied at every position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub trunk_norm: LayerNormParams,
    pub trunk_linear: LinearParams,
    pub head_norm: LayerNormParams,
    pub head_linear: LinearParams,
}

impl Regressor {
    fn init(input: usize, hidden: usize, outputs: usize, rng: &mut Rng) -> Self {
        Regressor {
            trunk_norm: LayerNormParams::new(input),
            trunk_linear: LinearParams::init(input, hidden, rng),
            head_norm: LayerNormParams::new(hidden),
            head_linear: LinearParams::init(hidden, outputs, rng),
        }
    }

    pub fn outputs(&self) -> usize {
        self.head_linear.out_dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SraParams {
    pub psi: LinearParams,
    pub semantic_conv: LinearParams,
    pub embed_proj: Option<LinearParams>,
    /// One shared regressor with `N` outputs, or `N` regressors with one.
    pub regressors: Vec<Regressor>,
}

impl SraParams {
    pub fn init(config: &SraConfig, channels: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if channels == 0 {
            return Err(SraError::Config("channel count must be >= 1".into()));
        }
        let k = config.descriptor_dim;
        let psi = LinearParams::init(config.descriptor_input_dim(channels), k, rng);
        let semantic_conv = LinearParams::init(channels, k, rng);
        let embed_proj = match config.embedding {
            EmbeddingMode::None => None,
            mode => Some(LinearParams::init(mode.raw_depth(config.budget), config.embed_dim, rng)),
        };
        let (count, outputs) = config.regressor_layout();
        let regressors = (0..count)
            .map(|_| Regressor::init(config.regressor_input_dim(), config.hidden, outputs, rng))
            .collect();
        Ok(SraParams {
            psi,
            semantic_conv,
            embed_proj,
            regressors,
        })
    }

    pub fn channels(&self) -> usize {
        self.semantic_conv.in_dim()
    }

    pub fn n_masks(&self) -> usize {
        self.regressors.iter().map(Regressor::outputs).sum()
    }

    /// Every weight tensor with a stable dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("psi.weight".to_string(), &self.psi.weight),
            ("psi.bias".to_string(), &self.psi.bias),
            ("semantic_conv.weight".to_string(), &self.semantic_conv.weight),
            ("semantic_conv.bias".to_string(), &self.semantic_conv.bias),
        ];
        if let Some(p) = &self.embed_proj {
            out.push(("embed_proj.weight".to_string(), &p.weight));
            out.push(("embed_proj.bias".to_string(), &p.bias));
        }
        for (i, r) in self.regressors.iter().enumerate() {
            out.push((format!("regressor.{i}.trunk_norm.gain"), &r.trunk_norm.gain));
            out.push((format!("regressor.{i}.trunk_norm.shift"), &r.trunk_norm.shift));
            out.push((format!("regressor.{i}.trunk_linear.weight"), &r.trunk_linear.weight));
            out.push((format!("regressor.{i}.trunk_linear.bias"), &r.trunk_linear.bias));
            out.push((format!("regressor.{i}.head_norm.gain"), &r.head_norm.gain));
            out.push((format!("regressor.{i}.head_norm.shift"), &r.head_norm.shift));
            out.push((format!("regressor.{i}.head_linear.weight"), &r.head_linear.weight));
            out.push((format!("regressor.{i}.head_linear.bias"), &r.head_linear.bias));
        }
        out
    }

    /// Same order as [`SraParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.psi.weight,
            &mut self.psi.bias,
            &mut self.semantic_conv.weight,
            &mut self.semantic_conv.bias,
        ];
        if let Some(p) = &mut self.embed_proj {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
        }
        for r in &mut self.regressors {
            out.push(&mut r.trunk_norm.gain);
            out.push(&mut r.trunk_norm.shift);
            out.push(&mut r.trunk_linear.weight);
            out.push(&mut r.trunk_linear.bias);
            out.push(&mut r.head_norm.gain);
            out.push(&mut r.head_norm.shift);
            out.push(&mut r.head_linear.weight);
            out.push(&mut r.head_linear.bias);
        }
        out
    }

    /// Copy of `self` with every tensor replaced, in [`SraParams::tensors`] order.
    pub fn with_tensors(&self, values: &[Tensor]) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.tensors_mut();
        if slots.len() != values.len() {
            return Err(SraError::Usage(format!("expected {} tensors, got {}", slots.len(), values.len())));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.dims() != v.dims() {
                return Err(SraError::shape("SraParams::with_tensors", format!("{:?}", slot.dims()), format!("{:?}", v.dims())));
            }
            *slot = v.clone();
        }
        Ok(out)
    }

    /// Same structure, all tensors zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    /// `self += s * other`, structure must match.
    pub fn add_scaled(&mut self, other: &SraParams, s: f64) {
        let theirs: Vec<&Tensor> = other.tensors().into_iter().map(|(_, t)| t).collect();
        for (mine, t) in self.tensors_mut().into_iter().zip(theirs) {
            mine.add_scaled(t, s);
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Closed-form size of [`SraParams`] for `channels` input channels.
///
/// With `Z = 2K + P` (P only when an embedding is enabled):
///
/// ```text
/// psi            (C_d + 1) K        C_d = C, or C*h*w for concatenation
/// semantic_conv  (C + 1) K
/// embed_proj     (D_raw + 1) P      D_raw = 2 (position) or 2M (area)
/// regressor      2Z + (Z + 1) H + 2H + (H + 1) O
/// ```
///
/// where the regressor appears once with `O = N`, or `N` times with
/// `O = 1` under independent heads.
pub fn parameter_count(config: &SraConfig, channels: usize) -> usize {
    let k = config.descriptor_dim;
    let p = config.active_embed_dim();
    let z = 2 * k + p;
    let hidden = config.hidden;
    let psi = (config.descriptor_input_dim(channels) + 1) * k;
    let semantic = (channels + 1) * k;
    let embed = if p > 0 { (config.embedding.raw_depth(config.budget) + 1) * p } else { 0 };
    let (count, outputs) = config.regressor_layout();
    let regressor = 2 * z + (z + 1) * hidden + 2 * hidden + (hidden + 1) * outputs;
    psi + semantic + embed + count * regressor
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn default_budget_matches_overhead_range() {
        let n = parameter_count(&SraConfig::default(), 256);
        assert_eq!(n, 217_233);
        assert!((150_000..=350_000).contains(&n));
    }

    #[test]
    fn tiny_golden_count() {
        // psi 1*1+1, conv 1*1+1, trunk norm 2+2, trunk linear 2*1+1,
        // head norm 1+1, head linear 1*1+1
        let cfg = SraConfig {
            n_masks: 1,
            descriptor_dim: 1,
            embed_dim: 0,
            hidden: 1,
            embedding: EmbeddingMode::None,
            ..SraConfig::default()
        };
        assert_eq!(parameter_count(&cfg, 1), 15);
    }

    #[test]
    fn extra_masks_only_grow_the_head() {
        let base = SraConfig::default();
        let doubled = SraConfig {
            n_masks: 98,
            ..base.clone()
        };
        let delta = parameter_count(&doubled, 256) - parameter_count(&base, 256);
        assert_eq!(delta, 49 * (base.hidden + 1));
    }

    #[test]
    fn formula_matches_allocated_params() {
        let grid = Some(GridSize::new(3, 2));
        let configs = [
            SraConfig::default(),
            SraConfig {
                embedding: EmbeddingMode::Position,
                descriptor: DescriptorMode::Maximum,
                ..SraConfig::default()
            },
            SraConfig {
                embedding: EmbeddingMode::None,
                independent_heads: true,
                n_masks: 5,
                ..SraConfig::default()
            },
            SraConfig {
                descriptor: DescriptorMode::Concatenation,
                fixed_grid: grid,
                descriptor_dim: 16,
                ..SraConfig::default()
            },
        ];
        for cfg in configs {
            let params = SraParams::init(&cfg, 7, &mut rng::stream(0, "t")).unwrap();
            assert_eq!(params.param_count(), parameter_count(&cfg, 7), "{cfg:?}");
            assert_eq!(params.n_masks(), cfg.n_masks);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SraConfig::default().validate().is_ok());
        let concat = SraConfig {
            descriptor: DescriptorMode::Concatenation,
            ..SraConfig::default()
        };
        assert!(matches!(concat.validate(), Err(SraError::Config(_))));
        let ok = SraConfig {
            fixed_grid: Some(GridSize::FIXED),
            ..concat
        };
        assert!(ok.validate().is_ok());
        for bad in [
            SraConfig { gamma: 0.0, ..SraConfig::default() },
            SraConfig { n_masks: 0, ..SraConfig::default() },
            SraConfig { hidden: 0, ..SraConfig::default() },
            SraConfig { embed_dim: 0, ..SraConfig::default() },
            SraConfig { budget: 4, fixed_grid: Some(GridSize::new(5, 1)), ..SraConfig::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn tensor_names_are_unique() {
        let cfg = SraConfig {
            independent_heads: true,
            n_masks: 3,
            ..SraConfig::default()
        };
        let p = SraParams::init(&cfg, 4, &mut rng::stream(1, "t")).unwrap();
        let mut names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
    }
}
