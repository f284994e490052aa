use rand::seq::SliceRandom;
use rand::Rng as _;

use super::*;
use crate::embeddings::EmbeddingMode;
use crate::numerics::{check_vjp, GradCheckConfig};
use crate::oracles;
use crate::rng;
use crate::sampler::block_average_pool;

fn small(embedding: EmbeddingMode, descriptor: DescriptorMode) -> SraConfig {
    SraConfig {
        n_masks: 3,
        budget: 9,
        descriptor_dim: 8,
        embed_dim: 4,
        hidden: 8,
        gamma: 50.0,
        descriptor,
        embedding,
        ..SraConfig::default()
    }
}

/// Initialized params with every tensor (biases, norm gains) jittered so
/// no gradient is trivially structured.
fn jittered(cfg: &SraConfig, channels: usize, seed: u64) -> SraParams {
    let mut r = rng::stream(seed, "test.params");
    let mut p = SraParams::init(cfg, channels, &mut r).unwrap();
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.2..0.2));
    }
    p
}

fn square_box() -> RoiBox {
    RoiBox::new(0.7, 1.2, 6.1, 6.6).unwrap()
}

#[test]
fn descriptor_examples() {
    let f = Tensor::from_fn(&[3, 2, 4], |i| (i / 8) as f64 * 1.5 - 1.0);
    let psi = LinearParams::init(3, 5, &mut rng::stream(1, "t"));
    let want = crate::numerics::linear(&Tensor::from_vec(vec![-1.0, 0.5, 2.0]), &psi).unwrap();
    let got = roi_descriptor(&f, DescriptorMode::Average, &psi).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-14);

    let one = Tensor::from_vec(vec![0.3, -0.7, 1.1]).reshape(&[3, 1, 1]).unwrap();
    assert_eq!(
        roi_descriptor(&one, DescriptorMode::Maximum, &psi).unwrap(),
        roi_descriptor(&one, DescriptorMode::Average, &psi).unwrap()
    );
    assert!(roi_descriptor(&f, DescriptorMode::Concatenation, &psi).is_err());
}

#[test]
fn semantic_map_examples() {
    let f = oracles::random_tensor(&[4, 3, 2], &mut rng::stream(2, "t"));
    assert_eq!(semantic_feature_map(&f, &LinearParams::identity(4)).unwrap(), f);
    let mut conv = LinearParams::zeros(4, 2);
    conv.bias = Tensor::from_vec(vec![3.0, -1.0]);
    let s = semantic_feature_map(&f, &conv).unwrap();
    assert!(s.data()[..6].iter().all(|v| *v == 3.0) && s.data()[6..].iter().all(|v| *v == -1.0));
    assert!(semantic_feature_map(&f, &LinearParams::zeros(3, 2)).is_err());
}

#[test]
fn zero_weights_give_zero_logits() {
    let cfg = small(EmbeddingMode::Area, DescriptorMode::Average);
    let mut params = SraParams::init(&cfg, 4, &mut rng::stream(3, "t")).unwrap();
    for r in &mut params.regressors {
        r.head_linear = LinearParams::zeros(cfg.hidden, cfg.n_masks);
        r.trunk_linear = LinearParams::zeros(cfg.regressor_input_dim(), cfg.hidden);
    }
    let mut rr = rng::stream(4, "t");
    let d = oracles::random_tensor(&[8], &mut rr);
    let s = oracles::random_tensor(&[8, 3, 3], &mut rr);
    let p = oracles::random_tensor(&[4, 3, 3], &mut rr);
    let l = mask_logits(&d, &s, Some(&p), &params).unwrap();
    assert!(l.data().iter().all(|v| *v == 0.0));
}

#[test]
fn logits_follow_spatial_permutation() {
    let cfg = small(EmbeddingMode::None, DescriptorMode::Average);
    let params = jittered(&cfg, 4, 5);
    let mut rr = rng::stream(6, "t");
    let d = oracles::random_tensor(&[8], &mut rr);
    let s = oracles::random_tensor(&[8, 2, 3], &mut rr);
    let mut perm: Vec<usize> = (0..6).collect();
    perm.shuffle(&mut rr);
    let permuted = permute_spatial(&s, &perm);
    let a = mask_logits(&d, &s, None, &params).unwrap();
    let b = mask_logits(&d, &permuted, None, &params).unwrap();
    assert_eq!(permute_spatial(&a, &perm), b);
}

/// `out(:, perm[p]) = x(:, p)`
fn permute_spatial(x: &Tensor, perm: &[usize]) -> Tensor {
    let plane = perm.len();
    let mut out = x.clone();
    for (ch, slice) in x.data().chunks(plane).enumerate() {
        for (p, v) in slice.iter().enumerate() {
            out.data_mut()[ch * plane + perm[p]] = *v;
        }
    }
    out
}

#[test]
fn mask_examples() {
    let m = masks_from_logits(&Tensor::zeros(&[2, 3, 4]), 50.0).unwrap();
    assert!(m.data().iter().all(|v| (v - 1.0 / 12.0).abs() < 1e-15));

    let l = oracles::random_tensor(&[3, 3, 3], &mut rng::stream(7, "t"));
    let m = masks_from_logits(&l, 1e-9).unwrap();
    assert!(m.data().iter().all(|v| (v - 1.0 / 9.0).abs() < 1e-6));

    // one logit 0.5 above every other: weight >= 1 / (1 + 8 e^-25)
    let mut l = Tensor::zeros(&[1, 3, 3]);
    l.data_mut()[4] = 0.5;
    let m = masks_from_logits(&l, 50.0).unwrap();
    assert!(m.data()[4] > 0.999);
}

#[test]
fn gamma_logit_product_invariance() {
    let l = oracles::random_tensor(&[2, 3, 3], &mut rng::stream(8, "t"));
    let base = masks_from_logits(&l, 50.0).unwrap();
    for c in [0.5, 4.0, 25.0] {
        let mut scaled = l.clone();
        scaled.scale(1.0 / c);
        assert!(masks_from_logits(&scaled, 50.0 * c).unwrap().max_abs_diff(&base) < 1e-12);
    }
}

#[test]
fn weighted_sum_examples() {
    let f = oracles::random_tensor(&[5, 3, 4], &mut rng::stream(9, "t"));
    let mut delta = Tensor::zeros(&[2, 3, 4]);
    delta.data_mut()[6] = 1.0; // (n=0, j=1, k=2)
    delta.data_mut()[12] = 1.0; // (n=1, j=0, k=0)
    let y = sample_roi_feature(&f, &delta).unwrap();
    for c in 0..5 {
        assert_eq!(y.data()[c], f.get3(c, 1, 2));
        assert_eq!(y.data()[5 + c], f.get3(c, 0, 0));
    }

    let uniform = Tensor::filled(&[3, 3, 4], 1.0 / 12.0);
    let y = sample_roi_feature(&f, &uniform).unwrap();
    let means = oracles::channel_mean(&f);
    for n in 0..3 {
        for c in 0..5 {
            assert!((y.data()[n * 5 + c] - means[c]).abs() < 1e-14);
        }
    }
    assert!(sample_roi_feature(&f, &Tensor::zeros(&[2, 4, 3])).is_err());
}

#[test]
fn zero_regressor_gives_mean_rows() {
    let cfg = small(EmbeddingMode::Area, DescriptorMode::Average);
    let mut params = jittered(&cfg, 4, 10);
    for r in &mut params.regressors {
        r.trunk_linear = LinearParams::zeros(cfg.regressor_input_dim(), cfg.hidden);
        r.head_linear = LinearParams::zeros(cfg.hidden, cfg.n_masks);
    }
    let map = oracles::random_tensor(&[4, 8, 8], &mut rng::stream(11, "t"));
    let out = sra_extract(&map, &square_box(), &params, &cfg).unwrap();
    assert_eq!(out.grid, GridSize::new(3, 3));
    let f = block_average_pool(&map, &square_box(), out.grid).unwrap();
    let means = oracles::channel_mean(&f);
    for n in 0..3 {
        for c in 0..4 {
            assert!((out.feature.data()[n * 4 + c] - means[c]).abs() < 1e-14);
        }
    }
}

#[test]
fn extract_matches_recomposition() {
    for (i, (emb, desc)) in [
        (EmbeddingMode::Area, DescriptorMode::Average),
        (EmbeddingMode::Position, DescriptorMode::Maximum),
        (EmbeddingMode::None, DescriptorMode::Average),
    ]
    .into_iter()
    .enumerate()
    {
        let cfg = small(emb, desc);
        let params = jittered(&cfg, 4, 20 + i as u64);
        let map = oracles::random_tensor(&[4, 10, 10], &mut rng::stream(30 + i as u64, "t"));
        let roi = RoiBox::new(0.5, 1.0, 9.0, 4.2).unwrap();
        let out = sra_extract(&map, &roi, &params, &cfg).unwrap();

        let grid = dynamic_grid_size(&roi, cfg.budget).unwrap();
        let f = block_average_pool(&map, &roi, grid).unwrap();
        let d = Tensor::from_vec(oracles::descriptor(&f, desc, &params.psi));
        let s = oracles::pointwise(&f, &params.semantic_conv);
        let p = crate::embeddings::raw_embedding(emb, grid, cfg.budget)
            .unwrap()
            .map(|raw| oracles::pointwise(&raw, params.embed_proj.as_ref().unwrap()));
        let logits = oracles::logits(d.data(), &s, p.as_ref(), &params);
        let m = masks_from_logits(&logits, cfg.gamma).unwrap();
        let y = oracles::weighted_sum(&f, &m);
        assert_eq!(out.grid, grid);
        assert!(out.masks.max_abs_diff(&m) < 1e-10);
        assert!(out.feature.max_abs_diff(&y) < 1e-10);
    }
}

#[test]
fn concatenation_requires_fixed_grid() {
    let cfg = SraConfig {
        descriptor: DescriptorMode::Concatenation,
        fixed_grid: Some(GridSize::new(2, 2)),
        ..small(EmbeddingMode::None, DescriptorMode::Average)
    };
    let params = jittered(&cfg, 4, 40);
    let map = oracles::random_tensor(&[4, 8, 8], &mut rng::stream(41, "t"));
    let out = sra_extract(&map, &square_box(), &params, &cfg).unwrap();
    assert_eq!(out.grid, GridSize::new(2, 2));

    let dynamic = SraConfig {
        fixed_grid: None,
        ..cfg
    };
    assert!(matches!(sra_extract(&map, &square_box(), &params, &dynamic), Err(SraError::Config(_))));
}

#[test]
fn permutation_invariance_without_embedding() {
    let cfg = small(EmbeddingMode::None, DescriptorMode::Average);
    let params = jittered(&cfg, 4, 50);
    let mut rr = rng::stream(51, "t");
    // 2x2 constant pixel blocks under a box whose samples land on pixel
    // centers, so the pooled map is exactly the block values
    let (h, w) = (3, 3);
    let base = oracles::random_tensor(&[4, h, w], &mut rr);
    let upsample = |b: &Tensor| {
        Tensor::from_fn(&[4, 2 * h, 2 * w], |i| {
            let (c, rest) = (i / (4 * h * w), i % (4 * h * w));
            let (y, x) = (rest / (2 * w), rest % (2 * w));
            b.get3(c, y / 2, x / 2)
        })
    };
    let roi = RoiBox::new(-0.5, -0.5, 2.0 * w as f64 - 0.5, 2.0 * h as f64 - 0.5).unwrap();
    let out = sra_extract(&upsample(&base), &roi, &params, &cfg).unwrap();
    assert_eq!(out.grid, GridSize::new(h, w));
    for _ in 0..10 {
        let mut perm: Vec<usize> = (0..h * w).collect();
        perm.shuffle(&mut rr);
        let moved = sra_extract(&upsample(&permute_spatial(&base, &perm)), &roi, &params, &cfg).unwrap();
        assert!(moved.feature.max_abs_diff(&out.feature) < 1e-9);
        assert!(moved.masks.max_abs_diff(&permute_spatial(&out.masks, &perm)) < 1e-9);
    }
}

/// The area embedding at a 3x3 grid has 18 raw channels and the trunk
/// input is 2K + P wide, so the per-axis cap is widened for this op.
const PIPELINE_MAX_DIM: usize = 32;

fn grad_check(cfg: &SraConfig, seed: u64) -> crate::numerics::VjpReport {
    let map = oracles::random_tensor(&[4, 8, 8], &mut rng::stream(seed, "test.map"));
    let op = SraPipelineOp {
        roi: square_box(),
        config: cfg.clone(),
        template: jittered(cfg, 4, seed),
    };
    let inputs = op.inputs(&map);
    check_vjp(
        &op,
        &inputs,
        &GradCheckConfig {
            seed,
            max_dim: PIPELINE_MAX_DIM,
            ..Default::default()
        },
    )
    .unwrap()
}

#[test]
fn full_pipeline_gradcheck_variants() {
    let variants = [
        small(EmbeddingMode::Area, DescriptorMode::Average),
        small(EmbeddingMode::Position, DescriptorMode::Maximum),
        small(EmbeddingMode::None, DescriptorMode::Average),
        SraConfig {
            independent_heads: true,
            ..small(EmbeddingMode::Area, DescriptorMode::Average)
        },
        SraConfig {
            fixed_grid: Some(GridSize::new(2, 3)),
            ..small(EmbeddingMode::Area, DescriptorMode::Concatenation)
        },
    ];
    for (i, cfg) in variants.iter().enumerate() {
        let r = grad_check(cfg, 100 + i as u64);
        assert!(r.passed, "{cfg:?}: {r:?}");
    }
}

#[test]
fn zero_cotangent_zero_gradients() {
    let cfg = small(EmbeddingMode::Area, DescriptorMode::Average);
    let params = jittered(&cfg, 4, 60);
    let map = oracles::random_tensor(&[4, 8, 8], &mut rng::stream(61, "t"));
    let fwd = sra_forward(&map, &square_box(), &params, &cfg, true).unwrap();
    let g = fwd
        .backward(&Tensor::zeros(&[3, 4]), &params, &cfg, BackwardOptions { map_grad: true, ..Default::default() })
        .unwrap();
    assert!(g.params.tensors().iter().all(|(_, t)| t.data().iter().all(|v| *v == 0.0)));
    assert!(g.map.unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn frozen_masks_gradient_is_mask_weight() {
    let cfg = small(EmbeddingMode::Area, DescriptorMode::Average);
    let params = jittered(&cfg, 4, 62);
    let map = oracles::random_tensor(&[4, 8, 8], &mut rng::stream(63, "t"));
    let fwd = sra_forward(&map, &square_box(), &params, &cfg, true).unwrap();
    let opts = BackwardOptions {
        frozen_masks: true,
        ..Default::default()
    };
    // one-hot cotangent on y(n, c): df(c', j, k) = [c' == c] m(n, j, k)
    for (n, c) in [(0, 0), (2, 3), (1, 2)] {
        let mut cot = Tensor::zeros(&[3, 4]);
        cot.data_mut()[n * 4 + c] = 1.0;
        let g = fwd.backward(&cot, &params, &cfg, opts).unwrap();
        for ch in 0..4 {
            for p in 0..9 {
                let want = if ch == c { fwd.output.masks.data()[n * 9 + p] } else { 0.0 };
                assert_eq!(g.pooled.data()[ch * 9 + p], want);
            }
        }
    }
}

#[test]
fn backward_without_tape_is_usage_error() {
    let cfg = small(EmbeddingMode::Area, DescriptorMode::Average);
    let params = jittered(&cfg, 4, 64);
    let map = oracles::random_tensor(&[4, 8, 8], &mut rng::stream(65, "t"));
    let fwd = sra_forward(&map, &square_box(), &params, &cfg, false).unwrap();
    let err = fwd.backward(&Tensor::zeros(&[3, 4]), &params, &cfg, BackwardOptions::default());
    assert!(matches!(err, Err(SraError::Usage(_))));
}

#[test]
fn sample_roi_feature_gradcheck() {
    let mut rr = rng::stream(66, "t");
    let f = oracles::random_tensor(&[3, 2, 4], &mut rr);
    let m = oracles::random_masks(2, 2, 4, &mut rr);
    let r = check_vjp(&SampleRoiFeatureOp, &[f, m], &GradCheckConfig::default()).unwrap();
    assert!(r.passed, "{r:?}");
}
