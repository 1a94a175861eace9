use mdunet::gradcheck::*;
use mdunet::graph::build;
use mdunet::tensor::{ConvSpec, ResampleMode};
use mdunet::{ArchConfig, CrossMode, DenseDegree, ModelGraph, Shape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;

fn random(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Distinct values at least 0.05 apart, so a ±ε probe never changes a
/// window's maximum.
fn separated(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let mut v: Vec<f64> = (0..shape.len()).map(|i| i as f64 * 0.05 - 1.0).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v).unwrap()
}

fn check_op<O: TensorOp>(op: impl Fn() -> O, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, tol: f64) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let obj = Projected::new(op(), &inputs, seed).unwrap();
        let r = grad_check(&obj, &inputs, 1e-3).unwrap();
        assert!(r.max_rel_error < tol, "seed {seed}: {r:?}");
    }
}

#[test]
fn conv3x3() {
    check_op(
        || Conv2dOp(ConvSpec::same3x3(3, true)),
        |r| vec![random(r, Shape::new(2, 2, 4, 4)), random(r, Shape::new(3, 2, 3, 3)), random(r, Shape::new(3, 1, 1, 1))],
        1e-3,
    );
}

#[test]
fn conv1x1() {
    check_op(
        || Conv2dOp(ConvSpec::pointwise(2, true)),
        |r| vec![random(r, Shape::new(2, 3, 4, 4)), random(r, Shape::new(2, 3, 1, 1)), random(r, Shape::new(2, 1, 1, 1))],
        1e-3,
    );
}

#[test]
fn concat() {
    check_op(
        || ConcatOp,
        |r| vec![random(r, Shape::new(2, 1, 3, 3)), random(r, Shape::new(2, 3, 3, 3))],
        1e-3,
    );
}

#[test]
fn maxpool() {
    check_op(
        || ResampleOp {
            mode: ResampleMode::MaxPool2,
            factor_log2: 1,
        },
        |r| vec![separated(r, Shape::new(2, 2, 4, 4))],
        1e-3,
    );
}

#[test]
fn nearest_upsample() {
    check_op(
        || ResampleOp {
            mode: ResampleMode::NearestUp2,
            factor_log2: 2,
        },
        |r| vec![random(r, Shape::new(1, 2, 2, 3))],
        1e-3,
    );
}

#[test]
fn transposed_conv() {
    check_op(
        || ResampleOp {
            mode: ResampleMode::TransposedConv2,
            factor_log2: 1,
        },
        |r| vec![random(r, Shape::new(2, 3, 2, 2)), random(r, Shape::new(3, 2, 2, 2)), random(r, Shape::new(2, 1, 1, 1))],
        1e-3,
    );
}

#[test]
fn relu() {
    check_op(|| ReluOp, |r| vec![random(r, Shape::new(2, 2, 3, 3))], 1e-3);
}

#[test]
fn batch_norm() {
    check_op(
        || BatchNormOp,
        |r| vec![random(r, Shape::new(3, 2, 3, 3)), random(r, Shape::new(2, 1, 1, 1)), random(r, Shape::new(2, 1, 1, 1))],
        1e-2,
    );
}

#[test]
fn softmax_cross_entropy() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&mut rng, Shape::new(2, 3, 3, 3));
        let labels = (0..18).map(|_| rng.gen_range(0..3)).collect();
        let obj = CrossEntropyObjective { labels };
        let r = grad_check(&obj, &[logits], 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-3, "seed {seed}: {r:?}");
    }
}

fn check_model(cfg: &ArchConfig, seeds: u64) {
    for seed in 0..seeds {
        let graph: ModelGraph<f64> = build(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random(&mut rng, Shape::new(2, 1, 8, 8));
        let labels = (0..128).map(|_| rng.gen_range(0..2)).collect();
        let obj = ModelLossObjective { graph, labels };
        let inputs = obj.inputs(x);
        // Larger steps straddle ReLU and max-pool kinks in models this small.
        let r = grad_check(&obj, &inputs, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-2, "{} seed {seed}: {r:?}", cfg.variant_name());
    }
}

#[test]
fn end_to_end_unet() {
    check_model(
        &ArchConfig {
            depth: 2,
            base_channels: 2,
            ..ArchConfig::default()
        },
        SEEDS,
    );
}

#[test]
fn end_to_end_dense_variants() {
    let small = ArchConfig {
        depth: 3,
        base_channels: 2,
        ..ArchConfig::default()
    };
    for (e, c, d) in [
        (DenseDegree::Degree(2), CrossMode::Cross3, DenseDegree::Degree(2)),
        (DenseDegree::Multi, CrossMode::Upper, DenseDegree::Multi),
        (DenseDegree::NONE, CrossMode::Lower, DenseDegree::Degree(1)),
    ] {
        check_model(&small.clone().with_dense(e, c, d), 2);
    }
}
