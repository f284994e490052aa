//! Parameter checkpoints: one JSON manifest holding the config and every
//! named tensor in tjson layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SraConfig, SraParams};
use crate::error::{Result, SraError};
use crate::numerics::ops::LAYER_NORM_EPSILON;
use crate::numerics::Tensor;
use crate::rng;

pub const CHECKPOINT_FORMAT: &str = "sra-params/v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    config: SraConfig,
    channels: usize,
    layer_norm_epsilon: f64,
    tensors: Vec<NamedTensor>,
}

pub fn to_json(params: &SraParams, config: &SraConfig) -> String {
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        config: config.clone(),
        channels: params.channels(),
        layer_norm_epsilon: LAYER_NORM_EPSILON,
        tensors: params
            .tensors()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                dims: t.dims().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    serde_json::to_string(&manifest).expect("manifest serializes")
}

pub fn from_json(text: &str) -> Result<(SraParams, SraConfig)> {
    let m: Manifest = serde_json::from_str(text)?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(SraError::Format(format!("unsupported checkpoint format {:?}", m.format)));
    }
    // structure from the config, values from the file
    let mut params = SraParams::init(&m.config, m.channels, &mut rng::stream(0, "checkpoint.skeleton"))?;
    let expected: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let found: Vec<&str> = m.tensors.iter().map(|t| t.name.as_str()).collect();
    if expected != found {
        return Err(SraError::Format(format!("tensor list mismatch: expected {expected:?}, found {found:?}")));
    }
    let values = m
        .tensors
        .into_iter()
        .map(|t| Tensor::new(t.dims, t.data))
        .collect::<Result<Vec<_>>>()?;
    params = params.with_tensors(&values).map_err(|e| SraError::Format(e.to_string()))?;
    for r in &mut params.regressors {
        r.trunk_norm.epsilon = m.layer_norm_epsilon;
        r.head_norm.epsilon = m.layer_norm_epsilon;
    }
    Ok((params, m.config))
}

pub fn save(path: impl AsRef<Path>, params: &SraParams, config: &SraConfig) -> Result<()> {
    fs::write(path, to_json(params, config))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(SraParams, SraConfig)> {
    from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EmbeddingMode;

    #[test]
    fn roundtrip_preserves_params() {
        let cfg = SraConfig {
            n_masks: 3,
            budget: 9,
            descriptor_dim: 4,
            embed_dim: 2,
            hidden: 5,
            embedding: EmbeddingMode::Position,
            ..SraConfig::default()
        };
        let params = SraParams::init(&cfg, 3, &mut rng::stream(5, "t")).unwrap();
        let text = to_json(&params, &cfg);
        assert!(text.starts_with(r#"{"format":"sra-params/v1""#));
        let (back, back_cfg) = from_json(&text).unwrap();
        assert_eq!(back, params);
        assert_eq!(back_cfg, cfg);
    }

    #[test]
    fn rejects_wrong_format_tag() {
        let cfg = SraConfig {
            n_masks: 1,
            descriptor_dim: 2,
            hidden: 2,
            embedding: EmbeddingMode::None,
            ..SraConfig::default()
        };
        let params = SraParams::init(&cfg, 2, &mut rng::stream(5, "t")).unwrap();
        let text = to_json(&params, &cfg).replace("sra-params/v1", "sra-params/v0");
        assert!(matches!(from_json(&text), Err(SraError::Format(_))));
    }
}
