use ersm_core::data::{generate, split, GeneratorConfig, Sample};
use ersm_core::model::{BackboneConfig, ConvLayerSpec, ModelConfig, ModelParams, ParamGroup, Variant};
use ersm_core::training::{grid_search, train, TrainConfig, TrainOutcome};
use ersm_core::FeatureShape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_data(seed: u64, n: usize) -> (Vec<Sample>, Vec<Sample>) {
    let gen = GeneratorConfig { height: 16, width: 16, object_size: 6, seed, ..Default::default() };
    let data = generate(&gen, n).unwrap();
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let (tr, te) = split(&labels, (0.8, 0.2), seed).unwrap();
    (tr.iter().map(|&i| data[i].clone()).collect(), te.iter().map(|&i| data[i].clone()).collect())
}

fn small_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { input: FeatureShape::new(1, 16, 16), layers: vec![ConvLayerSpec::same(4, 4)] },
        variant,
        ..ModelConfig::default()
    }
}

fn run(cfg: &ModelConfig, tc: &TrainConfig, data: &(Vec<Sample>, Vec<Sample>)) -> (ModelParams, TrainOutcome) {
    let init = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(tc.seed)).unwrap();
    let out = train(cfg, init.clone(), &data.0, &data.1, tc).unwrap();
    (init, out)
}

#[test]
fn trajectory_is_a_function_of_data_and_config() {
    let data = small_data(1, 80);
    let cfg = small_model(Variant::Full);
    let tc = TrainConfig { epochs: 2, seed: 4, ..Default::default() };
    let (_, a) = run(&cfg, &tc, &data);
    let (_, b) = run(&cfg, &tc, &data);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.final_params, b.final_params);
}

#[test]
fn frozen_groups_stay_bitwise_constant() {
    let data = small_data(2, 60);
    let cfg = small_model(Variant::Full);
    for group in [ParamGroup::Backbone, ParamGroup::Mask, ParamGroup::Head] {
        let tc = TrainConfig { epochs: 2, frozen: vec![group], ..Default::default() };
        let (init, out) = run(&cfg, &tc, &data);
        let (a, b) = (init.clone(), out.final_params);
        let same = match group {
            ParamGroup::Backbone => a.backbone == b.backbone,
            ParamGroup::Mask => a.mask.w == b.mask.w && a.mask.b.to_bits() == b.mask.b.to_bits(),
            ParamGroup::Head => a.head_w == b.head_w && a.head_b == b.head_b,
        };
        assert!(same, "{group:?} moved");
        assert_ne!(init, b, "nothing trained with {group:?} frozen");
    }
}

#[test]
fn zero_learning_rate_without_decay_is_a_no_op() {
    let data = small_data(3, 40);
    let cfg = small_model(Variant::Full);
    let tc = TrainConfig { epochs: 1, lr: 0.0, min_lr: 0.0, ..Default::default() };
    let (init, out) = run(&cfg, &tc, &data);
    assert_eq!(init, out.final_params);
}

#[test]
fn logged_total_is_the_sum_of_its_parts() {
    let data = small_data(4, 60);
    for variant in [Variant::Full, Variant::Unary, Variant::Baseline] {
        let (_, out) = run(&small_model(variant), &TrainConfig { epochs: 3, ..Default::default() }, &data);
        assert_eq!(out.metrics.len(), 4);
        for m in &out.metrics {
            assert!((m.ltotal - (m.lce + m.lreg)).abs() <= 1e-10, "{m:?}");
            if variant == Variant::Baseline {
                assert_eq!((m.lreg, m.mean_mask), (0.0, 1.0));
            }
        }
        assert!((out.metrics[0].mean_mask - 0.5).abs() < 0.05 || variant == Variant::Baseline);
    }
}

#[test]
fn full_without_pairwise_trains_like_unary() {
    let data = small_data(5, 60);
    let tc = TrainConfig { epochs: 3, ..Default::default() };
    let full = ModelConfig { lambda_pair: 0.0, ..small_model(Variant::Full) };
    let (_, a) = run(&full, &tc, &data);
    let (_, b) = run(&small_model(Variant::Unary), &tc, &data);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.final_params, b.final_params);
}

#[test]
fn grid_cells_share_one_initialization() {
    let data = small_data(6, 40);
    let cfg = small_model(Variant::Full);
    let tc = TrainConfig { epochs: 1, ..Default::default() };
    let init = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let report = grid_search(&cfg, &[0.0, 1e-3], &[0.0, 1e-3], &data.0, &data.1, &tc, &init).unwrap();
    assert_eq!(report.cells.len(), 4);
    let single =
        train(&ModelConfig { lambda_unary: 1e-3, lambda_pair: 0.0, ..cfg.clone() }, init, &data.0, &data.1, &tc)
            .unwrap();
    let cell = report.cells[2].outcome.as_ref().unwrap();
    assert_eq!(cell.mean_mask, single.final_metrics().mean_mask);
    assert!(report.best.is_some());
}

/// Warm start from a network pretrained on a disjoint draw, then train
/// mask and head on a frozen backbone.
fn warm_started_run(lambda_unary: f64, seed: u64) -> f64 {
    let gen = GeneratorConfig { seed: seed + 1_000_000, ..Default::default() };
    let pre = generate(&gen, 2000).unwrap();
    let base = ModelConfig { variant: Variant::Baseline, ..Default::default() };
    let init = ModelParams::init(&base, &mut ChaCha8Rng::seed_from_u64(seed + 1_000_000)).unwrap();
    let pretrained =
        train(&base, init, &pre, &pre[..200], &TrainConfig { epochs: 4, seed, ..Default::default() }).unwrap();
    let data = generate(&GeneratorConfig { seed, ..Default::default() }, 4000).unwrap();
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let (tr, te) = split(&labels, (0.8, 0.2), seed).unwrap();
    let train_set: Vec<Sample> = tr.iter().map(|&i| data[i].clone()).collect();
    let test_set: Vec<Sample> = te.iter().map(|&i| data[i].clone()).collect();
    let cfg = ModelConfig { lambda_unary, ..ModelConfig::default() };
    let mut params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    params.warm_start(&pretrained.final_params).unwrap();
    let tc = TrainConfig { seed, frozen: vec![ParamGroup::Backbone], ..Default::default() };
    train(&cfg, params, &train_set, &test_set, &tc).unwrap().final_metrics().mean_mask
}

/// Observed to fail: the unary energy alone rewards a higher keep rate for
/// scores below about 0.54, so raising its weight raises E[m].
#[test]
#[ignore = "fails on the desk-scale family: E[m] 0.96 with 10x unary weight vs 0.27"]
fn stronger_unary_weight_does_not_raise_keep_rate() {
    let default = warm_started_run(1e-3, 0);
    let strong = warm_started_run(1e-2, 0);
    assert!(strong <= default, "default {default} strong {strong}");
}
