//! Toy classification trainer: an RoI feature extractor followed by a linear
//! classifier, trained with softmax cross-entropy and momentum SGD.
//!
//! The feature maps are fixed inputs, so every instance is pooled once up
//! front; only the SRA parameters and the classifier are learned.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, SyntheticInstance};
use crate::baselines::{roi_align, roi_pool, DEFAULT_OUTPUT};
use crate::embeddings::EmbeddingCache;
use crate::error::{Result, SraError};
use crate::numerics::ops::linear_backward;
use crate::numerics::{linear, LinearParams, Tensor};
use crate::rng;
use crate::sampler::block_average_pool;
use crate::sra::{sra_forward_pooled, BackwardOptions, SraConfig, SraForward, SraParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Sra,
    RoiAlign,
    RoiPool,
}

impl ExtractorKind {
    pub fn name(self) -> &'static str {
        match self {
            ExtractorKind::Sra => "sra",
            ExtractorKind::RoiAlign => "roi_align",
            ExtractorKind::RoiPool => "roi_pool",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SraError::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && (0.0..1.0).contains(&self.momentum) && self.weight_decay >= 0.0) {
            return Err(SraError::Config(format!(
                "need lr >= 0, momentum in [0, 1), weight_decay >= 0; got {}, {}, {}",
                self.lr, self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// An instance reduced to what the trainable part of the model reads.
#[derive(Clone, Debug)]
pub enum Prepared {
    /// Pooled `(C, h, w)` map and the raw embedding of its grid.
    Sra { pooled: Tensor, raw: Option<Arc<Tensor>> },
    /// Flattened fixed-grid feature.
    Fixed(Tensor),
}

#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub items: Vec<Prepared>,
    pub labels: Vec<usize>,
}

pub fn prepare(kind: ExtractorKind, config: &SraConfig, instances: &[SyntheticInstance]) -> Result<PreparedSet> {
    let cache = EmbeddingCache::default();
    let items = instances
        .iter()
        .map(|inst| {
            Ok(match kind {
                ExtractorKind::Sra => {
                    let grid = config.grid_for(&inst.roi)?;
                    Prepared::Sra {
                        pooled: block_average_pool(&inst.feature_map, &inst.roi, grid)?,
                        raw: cache.get(config.embedding, grid, config.budget)?,
                    }
                }
                ExtractorKind::RoiAlign => Prepared::Fixed(roi_align(&inst.feature_map, &inst.roi, DEFAULT_OUTPUT)?.into_tensor()),
                ExtractorKind::RoiPool => Prepared::Fixed(roi_pool(&inst.feature_map, &inst.roi, DEFAULT_OUTPUT)?.into_tensor()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedSet {
        items,
        labels: instances.iter().map(|i| i.label).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub kind: ExtractorKind,
    pub sra_config: Option<SraConfig>,
    pub sra: Option<SraParams>,
    /// Flattened feature -> class logits.
    pub classifier: LinearParams,
    pub sra_velocity: Option<SraParams>,
    pub classifier_velocity: LinearParams,
    pub step: u64,
    pub seed: u64,
}

/// Batch-mean gradients, shaped like the trainable parameters.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub sra: Option<SraParams>,
    pub classifier: LinearParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

fn feature_len(kind: ExtractorKind, config: &SraConfig, channels: usize) -> usize {
    match kind {
        ExtractorKind::Sra => config.n_masks * channels,
        _ => DEFAULT_OUTPUT.area() * channels,
    }
}

/// Cross-entropy of `logits` against `label` and its gradient.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>, bool) {
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - top).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (logits[label] - top);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / z - if i == label { 1.0 } else { 0.0 })
        .collect();
    let best = logits
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if *v > logits[b] { i } else { b });
    (loss, grad, best == label)
}

impl TrainState {
    pub fn new(kind: ExtractorKind, config: &SraConfig, channels: usize, n_classes: usize, seed: u64) -> Result<Self> {
        let (sra_config, sra) = match kind {
            ExtractorKind::Sra => {
                let p = SraParams::init(config, channels, &mut rng::stream(seed, "train.init.sra"))?;
                (Some(config.clone()), Some(p))
            }
            _ => (None, None),
        };
        let classifier = LinearParams::init(
            feature_len(kind, config, channels),
            n_classes,
            &mut rng::stream(seed, "train.init.classifier"),
        );
        Ok(TrainState {
            kind,
            sra_velocity: sra.as_ref().map(SraParams::zeros_like),
            classifier_velocity: LinearParams::zeros(classifier.in_dim(), classifier.out_dim()),
            sra_config,
            sra,
            classifier,
            step: 0,
            seed,
        })
    }

    fn sra_parts(&self) -> Result<(&SraParams, &SraConfig)> {
        match (&self.sra, &self.sra_config) {
            (Some(p), Some(c)) => Ok((p, c)),
            _ => Err(SraError::Usage("state has no SRA parameters".into())),
        }
    }

    fn features(&self, item: &Prepared, record: bool) -> Result<(Tensor, Option<SraForward>)> {
        match item {
            Prepared::Sra { pooled, raw } => {
                let (params, config) = self.sra_parts()?;
                let fwd = sra_forward_pooled(pooled.clone(), params, config, raw.clone(), record)?;
                let flat = Tensor::from_vec(fwd.output.feature.data().to_vec());
                Ok((flat, Some(fwd)))
            }
            Prepared::Fixed(t) => Ok((Tensor::from_vec(t.data().to_vec()), None)),
        }
    }

    pub fn logits(&self, item: &Prepared) -> Result<Vec<f64>> {
        let (x, _) = self.features(item, false)?;
        Ok(linear(&x, &self.classifier)?.into_data())
    }

    /// Loss, correct count and batch-mean gradients for `(item, label)` pairs.
    pub fn gradients(&self, batch: &[(&Prepared, usize)]) -> Result<(StepStats, Gradients)> {
        let mut grads = Gradients {
            sra: self.sra.as_ref().map(SraParams::zeros_like),
            classifier: LinearParams::zeros(self.classifier.in_dim(), self.classifier.out_dim()),
        };
        let mut stats = StepStats { loss: 0.0, correct: 0 };
        for (item, label) in batch {
            let (x, fwd) = self.features(item, true)?;
            let logits = linear(&x, &self.classifier)?;
            let (loss, dlogits, hit) = cross_entropy(logits.data(), *label);
            stats.loss += loss;
            stats.correct += usize::from(hit);
            let lg = linear_backward(&x, &self.classifier, &Tensor::from_vec(dlogits))?;
            grads.classifier.weight.add_scaled(&lg.weight, 1.0);
            grads.classifier.bias.add_scaled(&lg.bias, 1.0);
            if let (Some(fwd), Some(acc)) = (fwd, grads.sra.as_mut()) {
                let (params, config) = self.sra_parts()?;
                let dy = lg.input.reshape(fwd.output.feature.dims())?;
                let g = fwd.backward(&dy, params, config, BackwardOptions::default())?;
                acc.add_scaled(&g.params, 1.0);
            }
        }
        let inv = 1.0 / batch.len().max(1) as f64;
        stats.loss *= inv;
        grads.classifier.weight.scale(inv);
        grads.classifier.bias.scale(inv);
        if let Some(g) = grads.sra.as_mut() {
            for t in g.tensors_mut() {
                t.scale(inv);
            }
        }
        Ok((stats, grads))
    }

    /// `g += wd * theta; v = mu * v + g; theta -= lr * v`.
    pub fn apply(&mut self, grads: &Gradients, cfg: &TrainConfig) {
        fn update(theta: Vec<&mut Tensor>, velocity: Vec<&mut Tensor>, grad: Vec<&Tensor>, cfg: &TrainConfig) {
            for ((t, v), g) in theta.into_iter().zip(velocity).zip(grad) {
                for ((tv, vv), gv) in t.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vv = cfg.momentum * *vv + gv + cfg.weight_decay * *tv;
                    *tv -= cfg.lr * *vv;
                }
            }
        }
        update(
            vec![&mut self.classifier.weight, &mut self.classifier.bias],
            vec![&mut self.classifier_velocity.weight, &mut self.classifier_velocity.bias],
            vec![&grads.classifier.weight, &grads.classifier.bias],
            cfg,
        );
        if let (Some(p), Some(v), Some(g)) = (self.sra.as_mut(), self.sra_velocity.as_mut(), grads.sra.as_ref()) {
            let g: Vec<&Tensor> = g.tensors().into_iter().map(|(_, t)| t).collect();
            update(p.tensors_mut(), v.tensors_mut(), g, cfg);
        }
        self.step += 1;
    }

    /// One SGD step on a mini-batch.
    pub fn step(&mut self, batch: &[(&Prepared, usize)], cfg: &TrainConfig) -> Result<StepStats> {
        let (stats, grads) = self.gradients(batch)?;
        if !stats.loss.is_finite() {
            return Err(SraError::Divergence {
                epoch: 0,
                step: self.step as usize,
                detail: format!("loss is {}", stats.loss),
            });
        }
        self.apply(&grads, cfg);
        Ok(stats)
    }

    /// `(accuracy, mean loss)` over a prepared set.
    pub fn evaluate(&self, set: &PreparedSet) -> Result<(f64, f64)> {
        if set.items.is_empty() {
            return Err(SraError::Usage("cannot evaluate on an empty set".into()));
        }
        let (mut correct, mut loss) = (0usize, 0.0);
        for (item, label) in set.items.iter().zip(&set.labels) {
            let (l, _, hit) = cross_entropy(&self.logits(item)?, *label);
            loss += l;
            correct += usize::from(hit);
        }
        let n = set.items.len() as f64;
        Ok((correct as f64 / n, loss / n))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub state: TrainState,
    pub curve: Vec<EpochStats>,
}

impl TrainResult {
    pub fn final_test_accuracy(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |e| e.test_accuracy)
    }
}

/// Trains one extractor head on `dataset.train`, scoring `dataset.test`
/// after every epoch.
pub fn train_toy(
    kind: ExtractorKind,
    config: &SraConfig,
    train: &TrainConfig,
    dataset: &Dataset,
    seed: u64,
) -> Result<TrainResult> {
    train.validate()?;
    config.validate()?;
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(SraError::Usage("training needs nonempty train and test splits".into()));
    }
    let train_set = prepare(kind, config, &dataset.train)?;
    let test_set = prepare(kind, config, &dataset.test)?;
    let cfg = &dataset.world.config;
    let mut state = TrainState::new(kind, config, cfg.channels, cfg.n_classes, seed)?;
    let mut order: Vec<usize> = (0..train_set.items.len()).collect();
    let mut curve = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng::indexed_stream(seed, "train.shuffle", epoch as u64));
        let (mut loss, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(train.batch_size) {
            let batch: Vec<(&Prepared, usize)> = chunk.iter().map(|&i| (&train_set.items[i], train_set.labels[i])).collect();
            let s = state.step(&batch, train).map_err(|e| match e {
                SraError::Divergence { step, detail, .. } => SraError::Divergence { epoch, step, detail },
                other => other,
            })?;
            loss += s.loss * chunk.len() as f64;
            correct += s.correct;
        }
        let n = order.len() as f64;
        let (test_accuracy, _) = state.evaluate(&test_set)?;
        curve.push(EpochStats {
            epoch,
            train_loss: loss / n,
            train_accuracy: correct as f64 / n,
            test_accuracy,
        });
    }
    Ok(TrainResult { state, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EmbeddingMode;
    use crate::harness::data::{generate_dataset, DataConfig};

    fn tiny_data() -> Dataset {
        generate_dataset(
            &DataConfig {
                n_classes: 2,
                train_per_class: 6,
                test_per_class: 3,
                channels: 4,
                map_size: 40,
                min_object: 14.0,
                max_object: 20.0,
                ..DataConfig::default()
            },
            5,
        )
        .unwrap()
    }

    fn tiny_sra() -> SraConfig {
        SraConfig {
            n_masks: 4,
            budget: 16,
            descriptor_dim: 4,
            embed_dim: 2,
            hidden: 6,
            embedding: EmbeddingMode::Area,
            ..SraConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let ds = tiny_data();
        let cfg = TrainConfig {
            epochs: 2,
            lr: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let r = train_toy(ExtractorKind::Sra, &tiny_sra(), &cfg, &ds, 3).unwrap();
        let fresh = TrainState::new(ExtractorKind::Sra, &tiny_sra(), 4, 2, 3).unwrap();
        assert_eq!(r.state.sra, fresh.sra);
        assert_eq!(r.state.classifier, fresh.classifier);
        assert_eq!(r.state.step, 6);
    }

    #[test]
    fn same_seed_same_curves() {
        let ds = tiny_data();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        for kind in [ExtractorKind::Sra, ExtractorKind::RoiAlign] {
            let a = train_toy(kind, &tiny_sra(), &cfg, &ds, 9).unwrap();
            let b = train_toy(kind, &tiny_sra(), &cfg, &ds, 9).unwrap();
            assert_eq!(a.curve, b.curve);
            assert_eq!(a.state, b.state);
        }
    }

    #[test]
    fn single_step_matches_hand_update() {
        let ds = tiny_data();
        let config = tiny_sra();
        let cfg = TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-3,
            ..TrainConfig::default()
        };
        let set = prepare(ExtractorKind::Sra, &config, &ds.train[..1]).unwrap();
        let mut state = TrainState::new(ExtractorKind::Sra, &config, 4, 2, 1).unwrap();
        let before = state.clone();

        // gradients by hand: classifier on y, then the SRA backward pass
        let params = before.sra.as_ref().unwrap();
        let Prepared::Sra { pooled, raw } = &set.items[0] else { unreachable!() };
        let fwd = sra_forward_pooled(pooled.clone(), params, &config, raw.clone(), true).unwrap();
        let y = Tensor::from_vec(fwd.output.feature.data().to_vec());
        let logits = linear(&y, &before.classifier).unwrap();
        let z: f64 = logits.data().iter().map(|v| v.exp()).sum();
        let label = set.labels[0];
        let dl: Vec<f64> = logits
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v.exp() / z - f64::from(u8::from(i == label)))
            .collect();
        let lg = linear_backward(&y, &before.classifier, &Tensor::from_vec(dl)).unwrap();
        let g = fwd
            .backward(&lg.input.clone().reshape(&[4, 4]).unwrap(), params, &config, BackwardOptions::default())
            .unwrap();

        state.step(&[(&set.items[0], label)], &cfg).unwrap();

        // zero velocity, so theta' = theta - lr (g + wd theta)
        let expect = |theta: &Tensor, grad: &Tensor| {
            Tensor::from_fn(theta.dims(), |i| {
                theta.data()[i] - cfg.lr * (grad.data()[i] + cfg.weight_decay * theta.data()[i])
            })
        };
        let w = expect(&before.classifier.weight, &lg.weight);
        assert!(state.classifier.weight.max_abs_diff(&w) < 1e-14);
        let got = state.sra.as_ref().unwrap().tensors();
        for ((name, t), ((_, theta), (_, grad))) in got.iter().zip(params.tensors().iter().zip(g.params.tensors())) {
            assert!(t.max_abs_diff(&expect(theta, grad)) < 1e-14, "{name}");
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn nan_loss_is_divergence() {
        let ds = tiny_data();
        let set = prepare(ExtractorKind::RoiAlign, &tiny_sra(), &ds.train[..2]).unwrap();
        let mut state = TrainState::new(ExtractorKind::RoiAlign, &tiny_sra(), 4, 2, 1).unwrap();
        state.classifier.bias.data_mut()[0] = f64::NAN;
        let err = state.step(&[(&set.items[0], 0)], &TrainConfig::default());
        assert!(matches!(err, Err(SraError::Divergence { .. })));
    }

    #[test]
    fn velocity_mirrors_parameters() {
        let s = TrainState::new(ExtractorKind::Sra, &tiny_sra(), 4, 3, 0).unwrap();
        let p = s.sra.as_ref().unwrap().tensors();
        let v = s.sra_velocity.as_ref().unwrap().tensors();
        assert_eq!(p.len(), v.len());
        for ((_, a), (_, b)) in p.iter().zip(&v) {
            assert_eq!(a.dims(), b.dims());
        }
        assert_eq!(s.classifier.weight.dims(), &[3, 16]);
    }
}
