//! The desk-scale comparison of SRA against RoI Align: per seed, generate a
//! dataset, train both heads, then measure invariance and mask diversity.

use serde::{Deserialize, Serialize};

use super::data::{generate_dataset, DataConfig, Dataset};
use super::eval::{invariance_eval_many, mask_diversity, DiversityReport, Extractor, InvarianceReport, TransformFamily};
use super::train::{train_toy, EpochStats, ExtractorKind, TrainConfig, TrainResult};
use crate::embeddings::EmbeddingMode;
use crate::error::{Result, SraError};
use crate::sra::{DescriptorMode, SraConfig};

/// Desk-scale expectations. These are calibration choices for the toy
/// problem, not figures from a full detector.
pub const DIVERSITY_TARGET: f64 = 0.5;
pub const EXPECTED_MARGIN_POINTS: f64 = 2.0;

/// SRA sized for 16-channel toy maps.
pub fn toy_sra_config() -> SraConfig {
    SraConfig {
        n_masks: 49,
        budget: 64,
        descriptor_dim: 32,
        embed_dim: 8,
        gamma: 50.0,
        hidden: 32,
        descriptor: DescriptorMode::Average,
        embedding: EmbeddingMode::Area,
        fixed_grid: None,
        independent_heads: false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvarianceConfig {
    /// Degrees.
    pub rotation: (f64, f64),
    pub scale: (f64, f64),
    /// Fraction of box size per axis.
    pub pan: f64,
    pub samples: usize,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        InvarianceConfig {
            rotation: (-45.0, 45.0),
            scale: (0.8, 1.25),
            pan: 0.1,
            samples: 200,
        }
    }
}

impl InvarianceConfig {
    pub fn families(&self) -> [TransformFamily; 3] {
        [
            TransformFamily::Rotation { range: self.rotation },
            TransformFamily::Reflection,
            TransformFamily::ScalePan {
                scale: self.scale,
                pan: self.pan,
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub sra: SraConfig,
    pub train: TrainConfig,
    /// Independent repetitions; seed `i` is `root + i`.
    pub seeds: usize,
    pub invariance: InvarianceConfig,
    pub diversity_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            sra: toy_sra_config(),
            train: TrainConfig::default(),
            seeds: 3,
            invariance: InvarianceConfig::default(),
            diversity_samples: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.sra.validate()?;
        self.train.validate()?;
        if self.seeds == 0 {
            return Err(SraError::Config("need at least one seed".into()));
        }
        Ok(())
    }

    pub fn seed_list(&self, root: u64) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| root.wrapping_add(i)).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub sra_curve: Vec<EpochStats>,
    pub roi_align_curve: Vec<EpochStats>,
    pub sra_accuracy: f64,
    pub roi_align_accuracy: f64,
    /// Percentage points, SRA minus RoI Align.
    pub margin: f64,
    pub invariance: Vec<InvarianceReport>,
    pub diversity: DiversityReport,
    #[serde(skip)]
    pub sra_model: Option<TrainResult>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentSummary {
    pub mean_sra_accuracy: f64,
    pub mean_roi_align_accuracy: f64,
    pub mean_margin: f64,
    /// The mean margin is nonnegative and at least one seed is positive.
    pub accuracy_passed: bool,
    pub expected_margin_reached: bool,
    pub mean_rotation_sra: f64,
    pub mean_rotation_roi_align: f64,
    pub invariance_passed: bool,
    pub mean_diversity_fraction: f64,
    pub diversity_passed: bool,
    /// Training loss fell every epoch over the first five, for both heads
    /// on every seed.
    pub early_loss_monotone: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentOutcome {
    pub seeds: Vec<SeedOutcome>,
    pub summary: ExperimentSummary,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn early_monotone(curve: &[EpochStats]) -> bool {
    curve.iter().take(5).collect::<Vec<_>>().windows(2).all(|w| w[1].train_loss < w[0].train_loss)
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, dataset: &Dataset) -> Result<SeedOutcome> {
    let sra = train_toy(ExtractorKind::Sra, &cfg.sra, &cfg.train, dataset, seed)?;
    let roi = train_toy(ExtractorKind::RoiAlign, &cfg.sra, &cfg.train, dataset, seed)?;
    let params = sra.state.sra.as_ref().expect("sra head has params");
    let extractors = [
        Extractor::Sra {
            params,
            config: &cfg.sra,
        },
        Extractor::RoiAlign,
        Extractor::RoiPool,
    ];
    let invariance = invariance_eval_many(
        &extractors,
        &dataset.world,
        &dataset.test,
        &cfg.invariance.families(),
        cfg.invariance.samples,
        seed,
    )?;
    let diversity = mask_diversity(params, &cfg.sra, &dataset.test, cfg.diversity_samples)?;
    let (a, b) = (sra.final_test_accuracy(), roi.final_test_accuracy());
    Ok(SeedOutcome {
        seed,
        sra_curve: sra.curve.clone(),
        roi_align_curve: roi.curve,
        sra_accuracy: a,
        roi_align_accuracy: b,
        margin: 100.0 * (a - b),
        invariance,
        diversity,
        sra_model: Some(sra),
    })
}

pub fn run_experiment(cfg: &ExperimentConfig, root_seed: u64) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let seeds = cfg
        .seed_list(root_seed)
        .into_iter()
        .map(|seed| {
            let dataset = generate_dataset(&cfg.data, seed)?;
            run_seed(cfg, seed, &dataset)
        })
        .collect::<Result<Vec<_>>>()?;

    let rotation = |s: &SeedOutcome, name: &str| {
        s.invariance
            .iter()
            .find(|r| r.extractor == name)
            .and_then(|r| r.mean_for("rotation"))
            .unwrap_or(f64::NAN)
    };
    let mean_margin = mean(seeds.iter().map(|s| s.margin));
    let mean_rotation_sra = mean(seeds.iter().map(|s| rotation(s, "sra")));
    let mean_rotation_roi_align = mean(seeds.iter().map(|s| rotation(s, "roi_align")));
    let mean_diversity_fraction = mean(seeds.iter().map(|s| s.diversity.fraction_below));
    let summary = ExperimentSummary {
        mean_sra_accuracy: mean(seeds.iter().map(|s| s.sra_accuracy)),
        mean_roi_align_accuracy: mean(seeds.iter().map(|s| s.roi_align_accuracy)),
        mean_margin,
        accuracy_passed: mean_margin >= 0.0 && seeds.iter().any(|s| s.margin > 0.0),
        expected_margin_reached: mean_margin >= EXPECTED_MARGIN_POINTS,
        mean_rotation_sra,
        mean_rotation_roi_align,
        invariance_passed: mean_rotation_sra > mean_rotation_roi_align,
        mean_diversity_fraction,
        diversity_passed: mean_diversity_fraction > DIVERSITY_TARGET,
        early_loss_monotone: seeds
            .iter()
            .all(|s| early_monotone(&s.sra_curve) && early_monotone(&s.roi_align_curve)),
    };
    Ok(ExperimentOutcome { seeds, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid_and_small() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert!(crate::sra::parameter_count(&cfg.sra, cfg.data.channels) < 20_000);
        assert_eq!(cfg.seed_list(u64::MAX), vec![u64::MAX, 0, 1]);
    }

    #[test]
    fn tiny_experiment_runs() {
        let cfg = ExperimentConfig {
            data: DataConfig {
                n_classes: 2,
                train_per_class: 4,
                test_per_class: 2,
                channels: 4,
                map_size: 40,
                min_object: 14.0,
                max_object: 20.0,
                ..DataConfig::default()
            },
            sra: SraConfig {
                n_masks: 4,
                budget: 16,
                descriptor_dim: 4,
                embed_dim: 2,
                hidden: 6,
                ..toy_sra_config()
            },
            train: TrainConfig {
                epochs: 2,
                batch_size: 4,
                ..TrainConfig::default()
            },
            seeds: 2,
            invariance: InvarianceConfig {
                samples: 3,
                ..InvarianceConfig::default()
            },
            diversity_samples: 3,
        };
        let out = run_experiment(&cfg, 10).unwrap();
        assert_eq!(out.seeds.len(), 2);
        assert_eq!(out.seeds[1].seed, 11);
        assert_eq!(out.seeds[0].invariance.len(), 3);
        assert_eq!(out.seeds[0].sra_curve.len(), 2);
        assert!(out.summary.mean_diversity_fraction >= 0.0);
    }
}
