//! Small quarter-scale training runs checking the qualitative behaviour of
//! the losses. These are statistical; the seeds are fixed.

use std::sync::OnceLock;

use patchlab::autodiff::Tape;
use patchlab::data::{synth_generate, PatchBatch};
use patchlab::gradlab::theta_histogram;
use patchlab::loss::{LossVariant, SignConvention};
use patchlab::metrics::evaluate;
use patchlab::net::{preprocess, Mode, NetworkParams, Scale};
use patchlab::seed;
use patchlab::train::{descriptor_set, sample_batch, train, RunState, TrainConfig};

struct Bench {
    train: PatchBatch,
    test: PatchBatch,
    hybrid: RunState<f32>,
}

fn config(seed_value: u64) -> TrainConfig {
    TrainConfig {
        seed: seed_value,
        scale: Scale::Quarter,
        batch_identities: 64,
        epochs: 15,
        validation: false,
        ..TrainConfig::default()
    }
}

fn bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let train_set = synth_generate(seed::derive(400, "data"), 1000, 3, 32).unwrap();
        let test = synth_generate(seed::derive(401, "data"), 300, 3, 32).unwrap();
        let hybrid = train::<f32>(&config(0), &train_set, None).unwrap();
        Bench {
            train: train_set,
            test,
            hybrid,
        }
    })
}

fn test_fpr(net: &NetworkParams<f32>, data: &PatchBatch) -> f64 {
    let idx: Vec<usize> = (0..data.len()).collect();
    evaluate(&descriptor_set(net, data, &idx).unwrap()).unwrap().fpr95
}

#[test]
fn smoothed_loss_does_not_increase() {
    let h = &bench().hybrid.history;
    let windows: Vec<f64> = h
        .chunks_exact(50)
        .map(|w| w.iter().map(|r| r.loss_total).sum::<f64>() / 50.0)
        .collect();
    assert!(windows.len() >= 4, "{} steps", h.len());
    for w in windows.windows(2) {
        assert!(w[1] <= w[0], "{windows:?}");
    }
}

#[test]
fn training_separates_positive_and_negative_angles() {
    let b = bench();
    let mut untrained = RunState::<f32>::new(&config(0)).params;
    calibrate(&mut untrained, &b.train);
    let before = theta_histogram(&untrained, &b.test, 20, 64, 36, 3).unwrap();
    let after = theta_histogram(&b.hybrid.params, &b.test, 20, 64, 36, 3).unwrap();
    assert_eq!(after.theta_pos.len(), 20 * 64);
    eprintln!("KS separation: untrained {:.4}, trained {:.4}", before.separation(), after.separation());
    assert!(
        before.separation() < after.separation(),
        "{} vs {}",
        before.separation(),
        after.separation()
    );
}

/// Running statistics for an untrained net from train-mode passes, with no
/// parameter update; the init buffers would make eval mode arbitrary.
fn calibrate(net: &mut NetworkParams<f32>, data: &PatchBatch) {
    let mut rng = seed::rng(0, "calibrate");
    for _ in 0..20 {
        let batch = sample_batch(data, &mut rng, 64).unwrap();
        let idx: Vec<usize> = (0..batch.len()).collect();
        let input = preprocess::<f32>(&batch, &idx, net.topology.input_size).unwrap();
        let mut tape = Tape::new();
        let f = net.forward_on_tape(&mut tape, &input, Mode::Train).unwrap();
        net.update_running_stats(&f.stats);
    }
}

fn mean_norm_gap(net: &NetworkParams<f32>, data: &PatchBatch) -> f64 {
    // 100 patches next to their brightened copies, clipped to the valid range
    let n = 100;
    let px = data.size * data.size;
    let mut patches = Vec::with_capacity(2 * n * px);
    for i in 0..n {
        let p = data.patch(i);
        patches.extend_from_slice(p);
        patches.extend(p.iter().map(|v| (1.5 * v).clamp(0.0, 1.0)));
    }
    let ids = (0..2 * n as u32).map(|i| i / 2).collect();
    let pairs = PatchBatch::new(data.size, patches, ids, "brightened").unwrap();
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let (raw, _) = net.describe(&pairs, &idx).unwrap();
    let dim = net.topology.descriptor_dim;
    let norm = |k: usize| raw[k * dim..(k + 1) * dim].iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    (0..n).map(|i| (norm(2 * i) - norm(2 * i + 1)).abs()).sum::<f64>() / n as f64
}

#[test]
fn norm_regularizer_reduces_raw_norm_gap_under_brightening() {
    let b = bench();
    let mut cfg = config(0);
    cfg.loss.gamma_reg = 0.0;
    let plain = train::<f32>(&cfg, &b.train, None).unwrap();
    let with_reg = mean_norm_gap(&b.hybrid.params, &b.test);
    let without = mean_norm_gap(&plain.params, &b.test);
    assert!(with_reg < without, "R_L2 {with_reg} vs gamma 0 {without}");
}

#[test]
fn hybrid_loss_beats_the_alternative_combinations() {
    let b = bench();
    let mean_fpr = |variant: LossVariant| -> f64 {
        (0..3u64)
            .map(|s| {
                if variant == LossVariant::Hybrid && s == 0 {
                    return test_fpr(&b.hybrid.params, &b.test);
                }
                let mut cfg = config(s);
                cfg.loss.variant = variant;
                cfg.loss.sign = SignConvention::Corrected;
                test_fpr(&train::<f32>(&cfg, &b.train, None).unwrap().params, &b.test)
            })
            .sum::<f64>()
            / 3.0
    };
    let hybrid = mean_fpr(LossVariant::Hybrid);
    let a = mean_fpr(LossVariant::LossA);
    let bb = mean_fpr(LossVariant::LossB);
    eprintln!("mean FPR@95: hybrid {hybrid:.4}, L_A {a:.4}, L_B {bb:.4}");
    assert!(hybrid <= a && hybrid <= bb, "hybrid {hybrid} L_A {a} L_B {bb}");
}
