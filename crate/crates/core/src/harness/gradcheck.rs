//! Finite-difference check of the whole SRA pipeline at small dimensions.

use rand::Rng as _;

use crate::embeddings::EmbeddingMode;
use crate::error::Result;
use crate::numerics::{check_vjp, GradCheckConfig, Tensor, VjpReport};
use crate::rng;
use crate::sampler::RoiBox;
use crate::sra::{DescriptorMode, SraConfig, SraParams, SraPipelineOp};

pub const PIPELINE_CHANNELS: usize = 4;

/// Widest tensor axis in the pipeline check: the 18-channel raw Area
/// Embedding and the `2K + P = 20` wide trunk input.
pub const PIPELINE_MAX_DIM: usize = 32;

/// `N = 3`, `K = 8`, `P = 4`, `gamma = 50`; a square box under `M = 9`
/// gives a 3x3 grid.
pub fn pipeline_config() -> SraConfig {
    SraConfig {
        n_masks: 3,
        budget: 9,
        descriptor_dim: 8,
        embed_dim: 4,
        hidden: 8,
        gamma: 50.0,
        descriptor: DescriptorMode::Average,
        embedding: EmbeddingMode::Area,
        fixed_grid: None,
        independent_heads: false,
    }
}

pub fn pipeline_box() -> RoiBox {
    RoiBox::new(0.7, 1.2, 6.1, 6.6).expect("valid box")
}

/// Checks the gradient of a random projection of `y` with respect to the
/// feature map and every parameter. Parameters are initialized from `seed`
/// and then jittered so biases and norm gains are not at their defaults.
pub fn pipeline_gradcheck(config: &SraConfig, seed: u64) -> Result<VjpReport> {
    let mut r = rng::stream(seed, "gradcheck.params");
    let mut params = SraParams::init(config, PIPELINE_CHANNELS, &mut r)?;
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.2..0.2));
    }
    let mut mr = rng::stream(seed, "gradcheck.map");
    let map = Tensor::from_fn(&[PIPELINE_CHANNELS, 8, 8], |_| mr.gen_range(-1.0..1.0));
    let op = SraPipelineOp {
        roi: pipeline_box(),
        config: config.clone(),
        template: params,
    };
    let inputs = op.inputs(&map);
    check_vjp(
        &op,
        &inputs,
        &GradCheckConfig {
            seed,
            max_dim: PIPELINE_MAX_DIM,
            ..GradCheckConfig::default()
        },
    )
}
