//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset,
//! e.g. `cargo test -p mdunet-cli --test acceptance -- 1 5`.

use std::io::Write;
use std::time::Instant;

use mdunet::gradcheck::*;
use mdunet::graph::build;
use mdunet::metrics::evaluate;
use mdunet::quant::*;
use mdunet::tensor::{conv2d, ConvSpec, ResampleMode};
use mdunet::train::{train_loop, Dataset, TrainConfig};
use mdunet::{ArchConfig, CrossMode, DenseDegree, ModelGraph, Parameter, Shape, Tensor};
use mdunet_cli::checkpoint::{Checkpoint, CheckpointError};
use mdunet_cli::commands::synthetic_test_spec;
use mdunet_cli::synth::{synth_dataset, SynthSpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use DenseDegree::{Degree, Multi};

struct Outcome {
    pass: bool,
    detail: String,
    notes: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
            notes: Vec::new(),
        }
    }
}

fn random(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

// ---------------------------------------------------------------- 1

fn parameter_accounting() -> Outcome {
    let base = ArchConfig::default();
    let count = |e, c, d| -> usize {
        let g: ModelGraph = build(&base.clone().with_dense(e, c, d), 0).unwrap();
        g.param_count().increment()
    };
    let unet: ModelGraph = build(&base, 0).unwrap();
    let baseline = unet.param_count().total;
    let none = DenseDegree::NONE;
    let singles: Vec<(String, usize)> = [
        ("Min", Multi, CrossMode::Skip, none),
        ("encoder_1", Degree(1), CrossMode::Skip, none),
        ("encoder_2", Degree(2), CrossMode::Skip, none),
        ("encoder_3", Degree(3), CrossMode::Skip, none),
        ("encoder_4", Degree(4), CrossMode::Skip, none),
        ("Mout", none, CrossMode::Skip, Multi),
        ("decoder_1", none, CrossMode::Skip, Degree(1)),
        ("decoder_2", none, CrossMode::Skip, Degree(2)),
        ("decoder_3", none, CrossMode::Skip, Degree(3)),
        ("decoder_4", none, CrossMode::Skip, Degree(4)),
        ("upper", none, CrossMode::Upper, none),
        ("lower", none, CrossMode::Lower, none),
        ("cross_3", none, CrossMode::Cross3, none),
        ("cross_5", none, CrossMode::Cross5, none),
    ]
    .into_iter()
    .map(|(n, e, c, d)| (n.to_string(), count(e, c, d)))
    .collect();
    let full = count(Degree(4), CrossMode::Cross5, Degree(4));
    let parts = ["encoder_4", "cross_5", "decoder_4"].map(|n| singles.iter().find(|s| s.0 == n).unwrap().1);

    let band = (7_000_000..=8_500_000).contains(&baseline);
    let limit = baseline as f64 * 0.01;
    let over: Vec<&(String, usize)> = singles.iter().filter(|s| s.1 as f64 >= limit).collect();
    let smallest_part = *parts.iter().min().unwrap();
    let full_ok = full < 3 * smallest_part;
    let mut o = Outcome::new(
        band && over.is_empty() && full_ok,
        format!("baseline {baseline} params"),
    );
    o.notes.push(format!("baseline in [7.0M, 8.5M]: {}", if band { "pass" } else { "FAIL" }));
    for (name, inc) in &singles {
        o.notes.push(format!(
            "{name}: +{inc} ({:.3}% of baseline) {}",
            100.0 * *inc as f64 / baseline as f64,
            if (*inc as f64) < limit { "pass" } else { "FAIL (>= 1%)" }
        ));
    }
    o.notes.push(format!(
        "encoder_4-cross_5-decoder_4: +{full}, 3x smallest component family = {}: {}",
        3 * smallest_part,
        if full_ok { "pass" } else { "FAIL" }
    ));
    o
}

// ---------------------------------------------------------------- 2

fn gradient_correctness() -> Outcome {
    type Make = fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;
    type Case<'a> = (&'a str, Box<dyn Fn() -> Box<dyn TensorOpBox>>, Make, f64);
    fn separated(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
        let mut v: Vec<f64> = (0..shape.len()).map(|i| i as f64 * 0.05 - 1.0).collect();
        v.shuffle(rng);
        Tensor::from_vec(shape, v).unwrap()
    }
    let cases: Vec<Case> = vec![
        (
            "conv3x3",
            Box::new(|| Box::new(Conv2dOp(ConvSpec::same3x3(3, true))) as Box<dyn TensorOpBox>),
            |r| vec![random(r, Shape::new(2, 2, 4, 4)), random(r, Shape::new(3, 2, 3, 3)), random(r, Shape::new(3, 1, 1, 1))],
            1e-3,
        ),
        (
            "conv1x1",
            Box::new(|| Box::new(Conv2dOp(ConvSpec::pointwise(2, true))) as Box<dyn TensorOpBox>),
            |r| vec![random(r, Shape::new(2, 3, 4, 4)), random(r, Shape::new(2, 3, 1, 1)), random(r, Shape::new(2, 1, 1, 1))],
            1e-3,
        ),
        (
            "concat",
            Box::new(|| Box::new(ConcatOp) as Box<dyn TensorOpBox>),
            |r| vec![random(r, Shape::new(2, 1, 3, 3)), random(r, Shape::new(2, 2, 3, 3))],
            1e-3,
        ),
        (
            "maxpool",
            Box::new(|| Box::new(ResampleOp { mode: ResampleMode::MaxPool2, factor_log2: 1 }) as Box<dyn TensorOpBox>),
            |r| vec![separated(r, Shape::new(2, 2, 4, 4))],
            1e-3,
        ),
        (
            "nearest_up",
            Box::new(|| Box::new(ResampleOp { mode: ResampleMode::NearestUp2, factor_log2: 1 }) as Box<dyn TensorOpBox>),
            |r| vec![random(r, Shape::new(2, 2, 3, 3))],
            1e-3,
        ),
        (
            "transposed_conv",
            Box::new(|| Box::new(ResampleOp { mode: ResampleMode::TransposedConv2, factor_log2: 1 }) as Box<dyn TensorOpBox>),
            |r| vec![random(r, Shape::new(2, 3, 2, 2)), random(r, Shape::new(3, 2, 2, 2)), random(r, Shape::new(2, 1, 1, 1))],
            1e-3,
        ),
        (
            "batch_norm",
            Box::new(|| Box::new(BatchNormOp) as Box<dyn TensorOpBox>),
            |r| vec![random(r, Shape::new(3, 2, 3, 3)), random(r, Shape::new(2, 1, 1, 1)), random(r, Shape::new(2, 1, 1, 1))],
            1e-2,
        ),
    ];
    let mut o = Outcome::new(true, "");
    let record = |o: &mut Outcome, name: &str, worst: f64, tol: f64| {
        let ok = worst < tol;
        o.pass &= ok;
        o.notes.push(format!("{name}: max rel err {worst:.2e} (< {tol:.0e}) {}", if ok { "pass" } else { "FAIL" }));
    };
    for (name, op, make, tol) in &cases {
        let mut worst = 0.0f64;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = make(&mut rng);
            let obj = Projected::new(OpRef(op()), &inputs, seed).unwrap();
            worst = worst.max(grad_check(&obj, &inputs, 1e-3).unwrap().max_rel_error);
        }
        record(&mut o, name, worst, *tol);
    }
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&mut rng, Shape::new(2, 3, 3, 3));
        let labels = (0..18).map(|_| rng.gen_range(0..3)).collect();
        let r = grad_check(&CrossEntropyObjective { labels }, &[logits], 1e-3).unwrap();
        worst = worst.max(r.max_rel_error);
    }
    record(&mut o, "softmax_ce", worst, 1e-3);
    let mut worst = 0.0f64;
    let cfg = ArchConfig {
        depth: 2,
        base_channels: 2,
        ..ArchConfig::default()
    };
    for seed in 0..5 {
        let graph: ModelGraph<f64> = build(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random(&mut rng, Shape::new(2, 1, 8, 8));
        let labels = (0..128).map(|_| rng.gen_range(0..2)).collect();
        let obj = ModelLossObjective { graph, labels };
        let inputs = obj.inputs(x);
        worst = worst.max(grad_check(&obj, &inputs, 1e-5).unwrap().max_rel_error);
    }
    record(&mut o, "end-to-end depth-2 base-2 (eps 1e-5)", worst, 1e-2);
    o.detail = format!("{} checks, 5 seeds each", o.notes.len());
    o
}

trait TensorOpBox {
    fn fwd(&self, i: &[Tensor<f64>]) -> mdunet::Result<Tensor<f64>>;
    fn bwd(&self, i: &[Tensor<f64>], g: &Tensor<f64>) -> mdunet::Result<Vec<Tensor<f64>>>;
}

impl<T: TensorOp> TensorOpBox for T {
    fn fwd(&self, i: &[Tensor<f64>]) -> mdunet::Result<Tensor<f64>> {
        self.forward(i)
    }
    fn bwd(&self, i: &[Tensor<f64>], g: &Tensor<f64>) -> mdunet::Result<Vec<Tensor<f64>>> {
        self.backward(i, g)
    }
}

struct OpRef(Box<dyn TensorOpBox>);

impl TensorOp for OpRef {
    fn forward(&self, i: &[Tensor<f64>]) -> mdunet::Result<Tensor<f64>> {
        self.0.fwd(i)
    }
    fn backward(&self, i: &[Tensor<f64>], g: &Tensor<f64>) -> mdunet::Result<Vec<Tensor<f64>>> {
        self.0.bwd(i, g)
    }
}

// ---------------------------------------------------------------- 3

fn conv_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let (n, c, co) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let (h, w) = (2 * rng.gen_range(1..=4), 2 * rng.gen_range(1..=4));
        let spec = if case % 2 == 0 {
            ConvSpec::same3x3(co, true)
        } else {
            ConvSpec::pointwise(co, true)
        };
        let (k, pad) = (spec.kernel, spec.padding);
        let x = random(&mut rng, Shape::new(n, c, h, w));
        let wt = random(&mut rng, spec.weight_shape(c));
        let b = random(&mut rng, Shape::new(co, 1, 1, 1));
        let got = conv2d(&x.cast::<f32>(), &wt.cast::<f32>(), Some(&b.cast::<f32>()), &spec).unwrap();
        for bn in 0..n {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = b.data()[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (iy, ix) = (y + ky, xx + kx);
                                    if iy < pad || ix < pad || iy - pad >= h || ix - pad >= w {
                                        continue;
                                    }
                                    acc += x.at(bn, ci, iy - pad, ix - pad) * wt.at(o, ci, ky, kx);
                                }
                            }
                        }
                        worst = worst.max((got.at(bn, o, y, xx) as f64 - acc).abs());
                    }
                }
            }
        }
    }
    Outcome::new(worst < 1e-5, format!("50 instances, max abs error {worst:.2e} (< 1e-5)"))
}

// ---------------------------------------------------------------- 4

fn variant_matrix() -> Outcome {
    let b = ArchConfig::default();
    let none = DenseDegree::NONE;
    let mut cfgs = vec![
        (Multi, CrossMode::Skip, none),
        (none, CrossMode::Skip, Multi),
        (Degree(4), CrossMode::Cross5, none),
        (Degree(4), CrossMode::Skip, Degree(4)),
        (none, CrossMode::Cross5, Degree(4)),
        (Degree(4), CrossMode::Cross5, Degree(4)),
    ];
    for n in 1..=4 {
        cfgs.push((Degree(n), CrossMode::Skip, none));
        cfgs.push((none, CrossMode::Skip, Degree(n)));
    }
    for c in [CrossMode::Upper, CrossMode::Lower, CrossMode::Cross3, CrossMode::Cross5] {
        cfgs.push((none, c, none));
    }
    let mut failed = Vec::new();
    for &(e, c, d) in &cfgs {
        let cfg = b.clone().with_dense(e, c, d);
        let ok = build::<f32>(&cfg, 0)
            .and_then(|g| g.shape_infer(Shape::new(2, 1, 64, 64)))
            .map(|s| *s.last().unwrap() == Shape::new(2, 2, 64, 64))
            .unwrap_or(false);
        if !ok {
            failed.push(cfg.variant_name());
        }
    }
    let mut o = Outcome::new(
        failed.is_empty(),
        format!("{} configurations -> (2, 2, 64, 64)", cfgs.len()),
    );
    o.notes.extend(failed.into_iter().map(|n| format!("failed: {n}")));
    o
}

// ---------------------------------------------------------------- 5

fn nearest(w: f32, b: &QuantBounds) -> f32 {
    let a = w.abs() as f64;
    let mut best = 0.0f64;
    for c in b.codebook().into_iter().map(f64::from).filter(|&c| c >= 0.0) {
        let (dc, db) = ((a - c).abs(), (a - best).abs());
        if dc < db || (dc == db && c > best) {
            best = c;
        }
    }
    if best == 0.0 {
        0.0
    } else {
        (best as f32).copysign(w)
    }
}

fn small_task() -> (Dataset, ArchConfig) {
    let data = synth_dataset(&SynthSpec {
        count: 8,
        size: 16,
        noise: 0.1,
        seed: 3,
    });
    let cfg = ArchConfig {
        depth: 3,
        base_channels: 4,
        ..ArchConfig::default()
    }
    .with_dense(Degree(2), CrossMode::Cross3, Degree(2));
    (data, cfg)
}

fn codebook_suite() -> Outcome {
    let mut o = Outcome::new(true, "");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for bits in [3u8, 5, 7] {
        let ws: Vec<f32> = (0..100_000)
            .map(|_| rng.gen_range(-1.0f32..1.0) * 2f32.powi(rng.gen_range(-12..2)))
            .collect();
        let b = compute_bounds(&ws, bits).unwrap();
        let bad = ws
            .iter()
            .filter(|&&w| {
                let q = quantize_value(w, &b);
                q != nearest(w, &b) || quantize_value(q, &b) != q || !b.contains(q)
            })
            .count();
        o.pass &= bad == 0;
        o.notes.push(format!("{bits}-bit: 1e5 reals, {bad} not nearest/idempotent, bounds {b:?}"));
    }

    let (data, cfg) = small_task();
    let mut model: ModelGraph = build(&cfg, 1).unwrap();
    let qcfg = QuantConfig {
        retrain_iterations: 5,
        ..QuantConfig::default()
    };
    let mut step_ok = true;
    let outcome = run_inq_schedule(
        &mut model,
        &qcfg,
        |step, m: &mut ModelGraph| -> mdunet::Result<()> {
            let tc = TrainConfig {
                iterations: Some(qcfg.retrain_iterations),
                seed: step as u64,
                ..TrainConfig::default()
            };
            train_loop(m, &data, &tc, None).map(|_| ())
        },
        |snap, _| {
            step_ok &= snap.state.frozen_in_codebook(&snap.params);
            std::ops::ControlFlow::Continue(())
        },
    )
    .map_err(|e| e.error)
    .unwrap();
    let all_frozen = model.params().iter().all(|p| p.frozen_mask.iter().all(|&f| f));
    o.pass &= step_ok && all_frozen && outcome.snapshots.len() == 3;
    o.notes.push(format!(
        "schedule 0.5/0.75/1.0: frozen weights in codebook after every step: {step_ok}, fully frozen at end: {all_frozen}"
    ));

    let mut model: ModelGraph = build(&cfg, 2).unwrap();
    let mut st = QuantState::new(model.params(), &qcfg).unwrap();
    apply_quant_step(model.params_mut(), &mut st, 0.5, qcfg.strategy).unwrap();
    let before = frozen_checksum(model.params());
    let tc = TrainConfig {
        iterations: Some(100),
        ..TrainConfig::default()
    };
    train_loop(&mut model, &data, &tc, None).unwrap();
    let after = frozen_checksum(model.params());
    let moved = model.params().iter().any(|p: &Parameter| {
        p.frozen_mask.iter().any(|&f| !f)
    });
    o.pass &= before == after && moved;
    o.notes.push(format!("frozen checksum over 100 SGD steps: {before:016x} -> {after:016x}"));
    o.detail = "codebook membership, nearest-codeword, frozen checksum".into();
    o
}

// ---------------------------------------------------------------- 6-8

struct Trained {
    mdu: ModelGraph,
    mdu_dice: f64,
    test: Dataset,
    train: Dataset,
}

fn desk_config() -> ArchConfig {
    ArchConfig {
        depth: 3,
        base_channels: 8,
        ..ArchConfig::default()
    }
}

fn train_desk(cfg: &ArchConfig, train: &Dataset) -> ModelGraph {
    let tc = TrainConfig {
        iterations: Some(500),
        ..TrainConfig::default()
    };
    let mut model: ModelGraph = build(cfg, tc.seed).unwrap();
    train_loop(&mut model, train, &tc, None).unwrap();
    model
}

fn desk_learning(cache: &mut Option<Trained>) -> Outcome {
    let spec = SynthSpec::default();
    let train = synth_dataset(&spec);
    let test = synth_dataset(&synthetic_test_spec(&spec));
    let mdu_cfg = desk_config().with_dense(Degree(2), CrossMode::Cross3, Degree(2));
    let mdu = train_desk(&mdu_cfg, &train);
    let unet = train_desk(&desk_config(), &train);
    let mdu_m = evaluate(&mdu, &test).unwrap();
    let unet_m = evaluate(&unet, &test).unwrap();
    let abs_ok = mdu_m.dice >= 0.90;
    let rel_ok = mdu_m.dice >= unet_m.dice - 0.02;
    let mut o = Outcome::new(
        abs_ok && rel_ok,
        format!("{} test Dice {:.4}, U-Net {:.4}", mdu_cfg.variant_name(), mdu_m.dice, unet_m.dice),
    );
    o.notes.push(format!("Dice >= 0.90: {}", if abs_ok { "pass" } else { "FAIL" }));
    o.notes.push(format!(
        "Dice >= U-Net - 0.02 = {:.4}: {}",
        unet_m.dice - 0.02,
        if rel_ok { "pass" } else { "FAIL" }
    ));
    o.notes.push(format!("mean IoU {:.4} vs U-Net {:.4}", mdu_m.mean_iou, unet_m.mean_iou));
    *cache = Some(Trained {
        mdu,
        mdu_dice: mdu_m.dice,
        test,
        train,
    });
    o
}

fn ensure_trained(cache: &mut Option<Trained>) {
    if cache.is_none() {
        let spec = SynthSpec::default();
        let train = synth_dataset(&spec);
        let test = synth_dataset(&synthetic_test_spec(&spec));
        let mdu = train_desk(&desk_config().with_dense(Degree(2), CrossMode::Cross3, Degree(2)), &train);
        let mdu_dice = evaluate(&mdu, &test).unwrap().dice;
        *cache = Some(Trained {
            mdu,
            mdu_dice,
            test,
            train,
        });
    }
}

fn half_quantized(cache: &mut Option<Trained>) -> Outcome {
    ensure_trained(cache);
    let t = cache.as_ref().unwrap();
    let mut model = t.mdu.clone();
    let qcfg = QuantConfig {
        schedule: vec![0.5],
        retrain_iterations: 100,
        ..QuantConfig::default()
    };
    run_inq_schedule(
        &mut model,
        &qcfg,
        |_, m: &mut ModelGraph| -> mdunet::Result<()> {
            let tc = TrainConfig {
                iterations: Some(qcfg.retrain_iterations),
                seed: 1,
                ..TrainConfig::default()
            };
            train_loop(m, &t.train, &tc, None).map(|_| ())
        },
        |_, _| std::ops::ControlFlow::Continue(()),
    )
    .map_err(|e| e.error)
    .unwrap();
    let dice = evaluate(&model, &t.test).unwrap().dice;
    let gap = (dice - t.mdu_dice).abs();
    Outcome::new(
        gap <= 0.03,
        format!(
            "5-bit, half frozen + 100 retrain iterations: Dice {dice:.4} vs {:.4} (|diff| {gap:.4} <= 0.03)",
            t.mdu_dice
        ),
    )
}

fn persistence(cache: &mut Option<Trained>) -> Outcome {
    let (model, test) = match cache {
        Some(t) => (t.mdu.clone(), t.test.clone()),
        None => {
            let (data, cfg) = small_task();
            let mut m: ModelGraph = build(&cfg, 4).unwrap();
            train_loop(&mut m, &data, &TrainConfig::default(), None).unwrap();
            (m, data)
        }
    };
    let mut model = model;
    let qcfg = QuantConfig::default();
    let mut st = QuantState::new(model.params(), &qcfg).unwrap();
    apply_quant_step(model.params_mut(), &mut st, 0.5, qcfg.strategy).unwrap();

    let bytes = Checkpoint::from_model(&model).to_bytes();
    let mut restored: ModelGraph = build(model.config(), 999).unwrap();
    Checkpoint::from_bytes(&bytes).unwrap().apply_to(&mut restored).unwrap();
    let bits = |g: &ModelGraph| -> Vec<u32> {
        g.params()
            .iter()
            .flat_map(|p| p.values().iter().map(|v| v.to_bits()))
            .chain(g.bn_states().iter().flat_map(|(_, s)| {
                s.running_mean.iter().chain(&s.running_var).map(|v| v.to_bits()).collect::<Vec<_>>()
            }))
            .collect()
    };
    let exact = bits(&model) == bits(&restored)
        && model.params().iter().zip(restored.params()).all(|(a, b)| a.frozen_mask == b.frozen_mask);
    let m_a = evaluate(&model, &test).unwrap();
    let m_b = evaluate(&restored, &test).unwrap();
    let metrics_same = m_a == m_b;
    let codebook = st.frozen_in_codebook(restored.params());

    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x01;
    let crc = matches!(Checkpoint::from_bytes(&corrupt), Err(CheckpointError::Crc { .. }));

    let mut o = Outcome::new(
        exact && metrics_same && codebook && crc,
        format!("{} bytes", bytes.len()),
    );
    o.notes.push(format!("bit-exact values, masks and running stats: {exact}"));
    o.notes.push(format!("metrics identical after reload: {metrics_same} (Dice {:.4})", m_b.dice));
    o.notes.push(format!("frozen subset in codebook after reload: {codebook}"));
    o.notes.push(format!("flipped byte rejected by CRC: {crc}"));
    o
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| args.is_empty() || args.iter().any(|a| a == &n.to_string());
    let mut cache = None;
    type Criterion<'a> = (usize, &'a str, Box<dyn FnOnce(&mut Option<Trained>) -> Outcome>);
    let criteria: Vec<Criterion> = vec![
        (1, "parameter accounting", Box::new(|_| parameter_accounting())),
        (2, "gradient correctness", Box::new(|_| gradient_correctness())),
        (3, "brute-force conv oracle", Box::new(|_| conv_oracle())),
        (4, "variant construction matrix", Box::new(|_| variant_matrix())),
        (5, "quantization codebook suite", Box::new(|_| codebook_suite())),
        (6, "desk-scale learning", Box::new(desk_learning)),
        (7, "half-quantized retention", Box::new(half_quantized)),
        (8, "persistence", Box::new(persistence)),
    ];
    let mut failed = Vec::new();
    let out = std::io::stdout();
    for (n, name, run) in criteria {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let o = run(&mut cache);
        let secs = start.elapsed().as_secs_f64();
        let mut out = out.lock();
        let _ = writeln!(
            out,
            "criterion {n} {}: {name} ({}) [{secs:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        for note in &o.notes {
            let _ = writeln!(out, "    {note}");
        }
        let _ = out.flush();
        if !o.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all passed");
}
