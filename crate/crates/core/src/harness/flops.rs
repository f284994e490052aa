//! Analytic multiply-add counts for one SRA forward pass.
//!
//! Conventions: a linear layer costs `in * out`, a layer norm `3 * dim`, the
//! spatial softmax `2` per logit, block pooling `16` taps per cell and
//! channel, and the descriptor reduction one per pooled value. Activations,
//! bias additions and the embedding table itself are free.

use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingMode;
use crate::error::Result;
use crate::sampler::GridSize;
use crate::sra::{DescriptorMode, SraConfig};

/// Proposals per image used for the aggregate figure.
pub const ROIS_PER_IMAGE: u64 = 300;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub pooling: u64,
    /// Mean/max reduction over positions (zero for concatenation).
    pub summary: u64,
    /// The descriptor projection.
    pub descriptor: u64,
    pub semantic: u64,
    pub embedding: u64,
    pub regressor: u64,
    pub softmax: u64,
    pub weighted_sum: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.pooling
            + self.summary
            + self.descriptor
            + self.semantic
            + self.embedding
            + self.regressor
            + self.softmax
            + self.weighted_sum
    }

    pub fn per_image(&self) -> u64 {
        self.total() * ROIS_PER_IMAGE
    }
}

pub fn flops_estimate(config: &SraConfig, channels: usize, grid: GridSize) -> Result<FlopsBreakdown> {
    config.validate()?;
    let u = |v: usize| v as u64;
    let (c, hw, k, n) = (u(channels), u(grid.area()), u(config.descriptor_dim), u(config.n_masks));
    let z = u(config.regressor_input_dim());
    let hidden = u(config.hidden);
    let (regressors, outputs) = config.regressor_layout();
    let per_position = u(regressors) * (3 * z + z * hidden + 3 * hidden + hidden * u(outputs));
    let summary_in = match config.descriptor {
        DescriptorMode::Concatenation => c * hw,
        _ => c,
    };
    let embed_depth = u(config.embedding.raw_depth(config.budget));
    Ok(FlopsBreakdown {
        pooling: 16 * c * hw,
        summary: if config.descriptor == DescriptorMode::Concatenation { 0 } else { c * hw },
        descriptor: summary_in * k,
        semantic: c * k * hw,
        embedding: if config.embedding == EmbeddingMode::None { 0 } else { embed_depth * u(config.embed_dim) * hw },
        regressor: per_position * hw,
        softmax: 2 * n * hw,
        weighted_sum: n * c * hw,
    })
}
