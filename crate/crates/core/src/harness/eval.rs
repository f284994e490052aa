//! Invariance and mask-diversity statistics.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::data::{apply_transform, Pose, SyntheticInstance, ToyWorld};
use crate::baselines::{roi_align, roi_pool, DEFAULT_OUTPUT};
use crate::error::{Result, SraError};
use crate::numerics::Tensor;
use crate::rng;
use crate::sra::{sra_extract, SraConfig, SraParams};

/// Similarities below this count as "distinct" masks.
pub const DIVERSITY_THRESHOLD: f64 = 0.3;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        // both zero counts as identical, one zero as unrelated
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Clone, Copy, Debug)]
pub enum Extractor<'a> {
    Sra { params: &'a SraParams, config: &'a SraConfig },
    RoiAlign,
    RoiPool,
}

impl Extractor<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Extractor::Sra { .. } => "sra",
            Extractor::RoiAlign => "roi_align",
            Extractor::RoiPool => "roi_pool",
        }
    }

    /// Flattened RoI feature of one instance.
    pub fn extract(&self, inst: &SyntheticInstance) -> Result<Tensor> {
        match self {
            Extractor::Sra { params, config } => Ok(sra_extract(&inst.feature_map, &inst.roi, params, config)?.feature),
            Extractor::RoiAlign => Ok(roi_align(&inst.feature_map, &inst.roi, DEFAULT_OUTPUT)?.into_tensor()),
            Extractor::RoiPool => Ok(roi_pool(&inst.feature_map, &inst.roi, DEFAULT_OUTPUT)?.into_tensor()),
        }
    }
}

/// Distribution of pose changes. Ranges are inclusive `(lo, hi)` pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformFamily {
    /// Rotation angle in degrees.
    Rotation { range: (f64, f64) },
    /// Horizontal reflection, always applied.
    Reflection,
    /// Box scale factor and pan as a fraction of box size in each axis.
    ScalePan { scale: (f64, f64), pan: f64 },
}

impl TransformFamily {
    pub fn name(&self) -> &'static str {
        match self {
            TransformFamily::Rotation { .. } => "rotation",
            TransformFamily::Reflection => "reflection",
            TransformFamily::ScalePan { .. } => "scale_pan",
        }
    }

    fn sample(&self, r: &mut rng::Rng) -> Pose {
        let uniform = |r: &mut rng::Rng, (lo, hi): (f64, f64)| if hi > lo { r.gen_range(lo..=hi) } else { lo };
        match *self {
            TransformFamily::Rotation { range } => Pose::rotation(uniform(r, range)),
            TransformFamily::Reflection => Pose {
                reflect: true,
                ..Pose::IDENTITY
            },
            TransformFamily::ScalePan { scale, pan } => Pose {
                scale: uniform(r, scale),
                pan_y: uniform(r, (-pan, pan)),
                pan_x: uniform(r, (-pan, pan)),
                ..Pose::IDENTITY
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySimilarity {
    pub family: TransformFamily,
    pub mean_cosine: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub extractor: String,
    pub families: Vec<FamilySimilarity>,
}

impl InvarianceReport {
    pub fn mean_for(&self, family: &str) -> Option<f64> {
        self.families.iter().find(|f| f.family.name() == family).map(|f| f.mean_cosine)
    }
}

/// Mean cosine between features before and after a random pose change, per
/// family. Instances are visited cyclically and the pose draws depend only on
/// `seed`, so every extractor sees the same transformed instances.
pub fn invariance_eval(
    extractor: &Extractor,
    world: &ToyWorld,
    instances: &[SyntheticInstance],
    families: &[TransformFamily],
    n_samples: usize,
    seed: u64,
) -> Result<InvarianceReport> {
    let mut reports = invariance_eval_many(std::slice::from_ref(extractor), world, instances, families, n_samples, seed)?;
    Ok(reports.remove(0))
}

/// [`invariance_eval`] for several extractors, rendering each transformed
/// instance once.
pub fn invariance_eval_many(
    extractors: &[Extractor],
    world: &ToyWorld,
    instances: &[SyntheticInstance],
    families: &[TransformFamily],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<InvarianceReport>> {
    if instances.is_empty() || n_samples == 0 {
        return Err(SraError::Usage("invariance evaluation needs instances and samples".into()));
    }
    let mut reports: Vec<InvarianceReport> = extractors
        .iter()
        .map(|e| InvarianceReport {
            extractor: e.name().into(),
            families: Vec::with_capacity(families.len()),
        })
        .collect();
    for family in families {
        let mut r = rng::stream(seed, &format!("eval.invariance.{}", family.name()));
        let mut totals = vec![0.0; extractors.len()];
        for i in 0..n_samples {
            let inst = &instances[i % instances.len()];
            let moved = apply_transform(world, inst, &family.sample(&mut r))?;
            for (total, ex) in totals.iter_mut().zip(extractors) {
                *total += cosine_similarity(ex.extract(inst)?.data(), ex.extract(&moved)?.data());
            }
        }
        for (report, total) in reports.iter_mut().zip(totals) {
            report.families.push(FamilySimilarity {
                family: *family,
                mean_cosine: total / n_samples as f64,
                samples: n_samples,
            });
        }
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// `N x N` mean pairwise cosine between flattened masks, row-major.
    pub n_masks: usize,
    pub matrix: Vec<f64>,
    /// Fraction of off-diagonal entries below [`DIVERSITY_THRESHOLD`].
    pub fraction_below: f64,
    pub threshold: f64,
    pub samples: usize,
}

/// Diversity statistics of a sequence of `(N, h, w)` mask stacks.
pub fn diversity_from_masks<'a>(masks: impl IntoIterator<Item = &'a Tensor>) -> Result<DiversityReport> {
    let mut sum: Vec<f64> = Vec::new();
    let mut n_masks = 0;
    let mut samples = 0;
    for m in masks {
        let (n, h, w) = m.dims3("mask_diversity")?;
        if samples == 0 {
            if n < 2 {
                return Err(SraError::Config(format!("diversity needs at least 2 masks, got {n}")));
            }
            n_masks = n;
            sum = vec![0.0; n * n];
        } else if n != n_masks {
            return Err(SraError::shape("mask_diversity", format!("{n_masks} masks"), format!("{n} masks")));
        }
        let plane = h * w;
        let rows: Vec<&[f64]> = m.data().chunks(plane).collect();
        for a in 0..n {
            sum[a * n + a] += 1.0;
            for b in a + 1..n {
                let c = cosine_similarity(rows[a], rows[b]);
                sum[a * n + b] += c;
                sum[b * n + a] += c;
            }
        }
        samples += 1;
    }
    if samples == 0 {
        return Err(SraError::Usage("diversity needs at least one sample".into()));
    }
    let matrix: Vec<f64> = sum.iter().map(|v| v / samples as f64).collect();
    let off = n_masks * (n_masks - 1);
    let below = (0..n_masks)
        .flat_map(|a| (0..n_masks).map(move |b| (a, b)))
        .filter(|(a, b)| a != b && matrix[a * n_masks + b] < DIVERSITY_THRESHOLD)
        .count();
    Ok(DiversityReport {
        n_masks,
        matrix,
        fraction_below: below as f64 / off as f64,
        threshold: DIVERSITY_THRESHOLD,
        samples,
    })
}

/// Mask diversity of an SRA model over the first `n_samples` instances.
pub fn mask_diversity(
    params: &SraParams,
    config: &SraConfig,
    instances: &[SyntheticInstance],
    n_samples: usize,
) -> Result<DiversityReport> {
    let masks = instances
        .iter()
        .take(n_samples)
        .map(|inst| Ok(sra_extract(&inst.feature_map, &inst.roi, params, config)?.masks))
        .collect::<Result<Vec<_>>>()?;
    diversity_from_masks(&masks)
}
