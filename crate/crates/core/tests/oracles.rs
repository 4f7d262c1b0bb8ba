//! Finite-difference, orthogonality and brute-force oracles.

use std::f64::consts::PI;

use patchlab::autodiff::{central_differences, finite_diff_check, max_relative_error, Tape, Tensor};
use patchlab::data::PatchBatch;
use patchlab::gradlab::decomposition_audit;
use patchlab::loss::{batch_loss, mine_triplets, LossConfig, LossVariant};
use patchlab::net::{init_topology, Mode, NetworkParams, NormScheme, Topology};
use patchlab::seed;
use patchlab::simgeo::{analytic_grad, compute_z, magnitude_of_theta, measure, Angle, MeasureKind};
use patchlab::train::loss_and_grads;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-5;

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random linear functional of a tape node, so that every output entry
/// carries a distinct weight.
fn weighted_sum(tape: &mut Tape<f64>, v: patchlab::autodiff::Var, rng_seed: u64) -> patchlab::Result<patchlab::autodiff::Var> {
    let shape = tape.value(v).shape().to_vec();
    let n = tape.value(v).numel();
    let mut rng = seed::rng(rng_seed, "weights");
    let w = tape.constant(Tensor::new(shape, gaussian(&mut rng, n))?)?;
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

#[test]
fn strided_padded_conv_matches_finite_differences() {
    let mut rng = seed::rng(1, "conv");
    let x = Tensor::new(vec![1, 2, 8, 8], gaussian(&mut rng, 128)).unwrap();
    let w = Tensor::new(vec![4, 2, 3, 3], gaussian(&mut rng, 72)).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let wv = tape.constant(w.clone()).unwrap();
    let y = tape.conv2d(xv, wv, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 4, 4, 4]);

    let err_x = finite_diff_check(
        |t, v| {
            let wv = t.constant(w.clone())?;
            let y = t.conv2d(v, wv, 2, 1)?;
            weighted_sum(t, y, 2)
        },
        &x,
        H,
    )
    .unwrap();
    let err_w = finite_diff_check(
        |t, v| {
            let xv = t.constant(x.clone())?;
            let y = t.conv2d(xv, v, 2, 1)?;
            weighted_sum(t, y, 3)
        },
        &w,
        H,
    )
    .unwrap();
    assert!(err_x < 1e-6 && err_w < 1e-6, "{err_x:e} {err_w:e}");
}

#[test]
fn l2_normalize_adjoint_is_orthogonal_to_input() {
    let mut rng = seed::rng(2, "l2");
    let v = gaussian(&mut rng, 128);
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![1, 128], v.clone()).unwrap()).unwrap();
    let y = tape.l2_normalize(x, 1e-12).unwrap();
    let seed_grad = Tensor::new(vec![1, 128], gaussian(&mut rng, 128)).unwrap();
    tape.backward_with(&[(y, seed_grad)]).unwrap();
    let g = tape.grad(x).unwrap().data().to_vec();
    let norm = |a: &[f64]| dot(a, a).sqrt();
    assert!(dot(&v, &g).abs() <= 1e-10 * norm(&v) * norm(&g));
}

#[test]
fn normalized_inner_product_matches_finite_differences_in_32_dims() {
    let mut rng = seed::rng(3, "inner");
    let y = gaussian(&mut rng, 32);
    for _ in 0..20 {
        let x = gaussian(&mut rng, 32);
        let analytic = analytic_grad(MeasureKind::NormInner, &x, &y).unwrap().d_x;
        let numeric = central_differences(|p| measure(MeasureKind::NormInner, p, &y), &x, H, None).unwrap();
        assert!(max_relative_error(&analytic, &numeric) < 1e-6);
    }
}

fn toy_net(norm: NormScheme) -> NetworkParams<f64> {
    let topo = Topology {
        input_size: 8,
        channels: [2, 2, 3, 3, 4, 4],
        descriptor_dim: 5,
    };
    init_topology(21, topo, norm).unwrap()
}

fn toy_batch(pairs: usize) -> PatchBatch {
    let mut rng = seed::rng(4, "toy");
    let mut patches = Vec::new();
    let mut ids = Vec::new();
    for id in 0..pairs {
        let base: Vec<f64> = gaussian(&mut rng, 64);
        for _ in 0..2 {
            patches.extend(base.iter().map(|b| (0.5 + 0.15 * (b + 0.5 * rng.sample::<f64, _>(StandardNormal))) as f32));
            ids.push(id as u32);
        }
    }
    PatchBatch::new(8, patches, ids, "toy").unwrap()
}

#[test]
fn full_network_loss_matches_finite_differences() {
    let batch = toy_batch(3);
    let cfg = LossConfig {
        margin: 5.0,
        ..LossConfig::default()
    };
    for norm in [NormScheme::Frn, NormScheme::Bn] {
        let net = toy_net(norm);
        let (_, grads, _) = loss_and_grads(&net, &batch, &cfg).unwrap();
        let objective = |probe: &NetworkParams<f64>| -> patchlab::Result<f64> { Ok(loss_and_grads(probe, &batch, &cfg)?.0.total) };
        let mut worst = 0f64;
        for (k, p) in net.params.iter().enumerate() {
            let numeric = central_differences(
                |v| {
                    let mut probe = net.clone();
                    probe.params[k].tensor.data_mut().copy_from_slice(v);
                    objective(&probe)
                },
                p.tensor.data(),
                H,
                None,
            )
            .unwrap();
            worst = worst.max(max_relative_error(grads[k].data(), &numeric));
        }
        assert!(worst < 1e-4, "{}: {worst:e}", norm.name());
    }
}

#[test]
fn frn_and_tlu_match_finite_differences() {
    let mut rng = seed::rng(5, "frn");
    let x = Tensor::new(vec![2, 3, 4, 4], gaussian(&mut rng, 96)).unwrap();
    let gamma = Tensor::new(vec![3], gaussian(&mut rng, 3)).unwrap();
    let beta = Tensor::new(vec![3], gaussian(&mut rng, 3)).unwrap();
    let err = finite_diff_check(
        |t, v| {
            let g = t.constant(gamma.clone())?;
            let b = t.constant(beta.clone())?;
            let y = t.frn(v, g, b, 1e-6)?;
            weighted_sum(t, y, 6)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-6, "frn {err:e}");

    // TLU: keep every input at least 1e-3 away from its threshold
    let tau = Tensor::new(vec![3], vec![-0.3, 0.1, 0.5]).unwrap();
    let mut xs = gaussian(&mut rng, 96);
    for (i, v) in xs.iter_mut().enumerate() {
        let t = tau.data()[(i / 16) % 3];
        if (*v - t).abs() < 1e-3 {
            *v = t + 0.1;
        }
    }
    let x = Tensor::new(vec![2, 3, 4, 4], xs).unwrap();
    let err_x = finite_diff_check(
        |t, v| {
            let tv = t.constant(tau.clone())?;
            let y = t.tlu(v, tv)?;
            weighted_sum(t, y, 7)
        },
        &x,
        H,
    )
    .unwrap();
    let err_tau = finite_diff_check(
        |t, v| {
            let xv = t.constant(x.clone())?;
            let y = t.tlu(xv, v)?;
            weighted_sum(t, y, 8)
        },
        &tau,
        H,
    )
    .unwrap();
    assert!(err_x < 1e-6 && err_tau < 1e-6, "tlu {err_x:e} {err_tau:e}");
}

#[test]
fn frn_input_adjoint_is_orthogonal_per_channel() {
    let mut rng = seed::rng(6, "frn-ortho");
    let x = Tensor::new(vec![1, 4, 5, 5], gaussian(&mut rng, 100)).unwrap();
    let mut tape = Tape::new();
    let xv = tape.param(x.clone()).unwrap();
    let g = tape.param(Tensor::new(vec![4], gaussian(&mut rng, 4)).unwrap()).unwrap();
    let b = tape.param(Tensor::new(vec![4], gaussian(&mut rng, 4)).unwrap()).unwrap();
    let y = tape.frn(xv, g, b, 0.0).unwrap();
    tape.backward_with(&[(y, Tensor::new(vec![1, 4, 5, 5], gaussian(&mut rng, 100)).unwrap())]).unwrap();
    let gx = tape.grad(xv).unwrap().data();
    for (xc, gc) in x.data().chunks(25).zip(gx.chunks(25)) {
        assert!(dot(xc, gc).abs() <= 1e-8 * dot(xc, xc).sqrt() * dot(gc, gc).sqrt());
    }
}

#[test]
fn g_d_is_half_angle_cosine_at_random_angles() {
    let mut rng = seed::rng(7, "angles");
    for _ in 0..1000 {
        let t: f64 = PI * (1.0 - rng.gen::<f64>());
        let g = magnitude_of_theta(MeasureKind::NormL2, Angle::new(t).unwrap()).unwrap();
        assert!((g - (t / 2.0).cos()).abs() < 1e-12);
    }
}

#[test]
fn hybrid_magnitude_tends_to_g_s_for_large_alpha() {
    let big = MeasureKind::hybrid(1e6).unwrap();
    let n = 2000;
    for i in 0..=n {
        let t = 0.1 + (PI - 0.2) * i as f64 / n as f64;
        let a = Angle::new(t).unwrap();
        let gh = magnitude_of_theta(big, a).unwrap();
        let gs = magnitude_of_theta(MeasureKind::NormInner, a).unwrap();
        assert!((gh - gs).abs() < 1e-3, "theta {t}: {gh} vs {gs}");
    }
}

#[test]
fn raw_inner_gradients_have_parallel_parts() {
    let normalized = decomposition_audit(MeasureKind::NormL2, 1000, 128, 0).unwrap();
    assert!(normalized.max_ratio < 1e-10);
    let raw = decomposition_audit(MeasureKind::RawInner, 1000, 128, 0).unwrap();
    assert!(raw.mean_ratio > 0.01, "{}", raw.mean_ratio);
}

// ---- loss against brute force -------------------------------------------

struct Fixture {
    unit: Vec<f64>,
    raw: Vec<f64>,
    labels: Vec<u32>,
    dim: usize,
}

fn fixture(seed_value: u64, pairs: usize, dim: usize) -> Fixture {
    let mut rng = seed::rng(seed_value, "fixture");
    let (mut u, mut raw, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for id in 0..pairs {
        let base = gaussian(&mut rng, dim);
        for _ in 0..2 {
            let r: Vec<f64> = base.iter().map(|b| b + 0.7 * rng.sample::<f64, _>(StandardNormal)).collect();
            u.extend(unit(r.clone()));
            raw.extend(r);
            labels.push(id as u32);
        }
    }
    Fixture { unit: u, raw, labels, dim }
}

/// Exhaustive hardest-negative search: every (pair member, other-identity
/// row) candidate, first minimum in scan order.
fn brute_mine(f: &Fixture) -> Vec<(usize, usize, usize)> {
    let d = f.dim;
    let row = |i: usize| &f.unit[i * d..(i + 1) * d];
    let dist = |i: usize, j: usize| row(i).iter().zip(row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut out = Vec::new();
    for i in 0..f.labels.len() / 2 {
        let (a, p) = (2 * i, 2 * i + 1);
        let mut best = (f64::INFINITY, 0, 0);
        for j in (0..f.labels.len()).filter(|&j| f.labels[j] != f.labels[a]) {
            for side in [a, p] {
                let dd = dist(side, j);
                if dd < best.0 {
                    best = (dd, side, j);
                }
            }
        }
        let positive = if best.1 == a { p } else { a };
        out.push((best.1, positive, best.2));
    }
    out
}

#[test]
fn mining_matches_exhaustive_scan() {
    for s in 0..20 {
        let f = fixture(s, 8, 16);
        let got: Vec<_> = mine_triplets(&f.unit, f.dim, &f.labels)
            .unwrap()
            .iter()
            .map(|t| (t.anchor, t.positive, t.negative))
            .collect();
        assert_eq!(got, brute_mine(&f), "seed {s}");
    }
}

#[test]
fn batch_loss_gradient_matches_finite_differences() {
    let f = fixture(30, 6, 8);
    for variant in [
        LossVariant::Hybrid,
        LossVariant::PureS,
        LossVariant::PureD,
        LossVariant::LossA,
        LossVariant::LossB,
    ] {
        let cfg = LossConfig {
            variant,
            ..LossConfig::default()
        };
        let bl = batch_loss(&f.unit, &f.raw, f.dim, &f.labels, &cfg).unwrap();
        let nu = f.unit.len();
        let flat: Vec<f64> = f.unit.iter().chain(&f.raw).copied().collect();
        let numeric = central_differences(
            |p| Ok(batch_loss(&p[..nu], &p[nu..], f.dim, &f.labels, &cfg)?.total),
            &flat,
            H,
            None,
        )
        .unwrap();
        let analytic: Vec<f64> = bl.grad_unit.iter().chain(&bl.grad_raw).copied().collect();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "{}: {err:e}", variant.name());
    }
}

#[test]
fn hybrid_batch_loss_equals_recomputation_from_descriptors() {
    let cfg = LossConfig::default();
    let z = compute_z(cfg.alpha).unwrap();
    for s in 0..10 {
        let f = fixture(100 + s, 10, 12);
        let d = f.dim;
        let s_h = |i: usize, j: usize| {
            let c = dot(&f.unit[i * d..(i + 1) * d], &f.unit[j * d..(j + 1) * d]);
            (cfg.alpha * (1.0 - c) + (2.0 * (1.0 - c)).max(0.0).sqrt()) / z
        };
        let triplets = brute_mine(&f);
        let triplet: f64 = triplets
            .iter()
            .map(|&(a, p, n)| (cfg.margin + s_h(a, p) - s_h(a, n)).max(0.0))
            .sum::<f64>()
            / triplets.len() as f64;
        let norm = |i: usize| dot(&f.raw[i * d..(i + 1) * d], &f.raw[i * d..(i + 1) * d]).sqrt();
        let pairs = f.labels.len() / 2;
        let reg: f64 = (0..pairs).map(|i| (norm(2 * i) - norm(2 * i + 1)).powi(2)).sum::<f64>() / pairs as f64;
        let want = triplet + cfg.gamma_reg * reg;
        let got = batch_loss(&f.unit, &f.raw, d, &f.labels, &cfg).unwrap();
        assert!((got.total - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {want}", got.total);
        assert!((got.r_l2 - reg).abs() <= 1e-12 * reg.max(1.0));
    }
}

#[test]
fn eval_mode_network_is_deterministic_and_unit() {
    let net = toy_net(NormScheme::Frn);
    let batch = toy_batch(4);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let (raw, unit) = net.describe(&batch, &idx).unwrap();
    let (raw2, unit2) = net.describe(&batch, &idx).unwrap();
    assert_eq!((raw, &unit), (raw2, &unit2));
    for r in unit.chunks(5) {
        assert!((dot(r, r).sqrt() - 1.0).abs() < 1e-12);
    }
    let mut tape = Tape::new();
    let input = patchlab::net::preprocess::<f64>(&batch, &idx, 8).unwrap();
    assert!(net.forward_on_tape(&mut tape, &input, Mode::Eval).is_ok());
}
