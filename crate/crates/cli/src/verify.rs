//! One-shot oracle suite: finite differences, orthogonality, angle
//! identities, the Z contract and monotonicity.

use std::f64::consts::PI;
use std::time::Instant;

use patchlab::autodiff::{central_differences, max_relative_error, Tape, Tensor};
use patchlab::gradlab::{decompose, magnitude_curves};
use patchlab::loss::{batch_loss, LossConfig, LossVariant};
use patchlab::net::{init_topology, Mode, NetworkParams, NormScheme, Topology};
use patchlab::seed;
use patchlab::simgeo::{analytic_grad, compute_z, magnitude_of_theta, measure, Angle, GradPair, MeasureKind};
use patchlab::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;
pub const NETWORK_TOL: f64 = 1e-4;
pub const ORTHO_TOL: f64 = 1e-10;
pub const FD_DIMS: [usize; 3] = [2, 8, 128];
pub const FD_PAIRS: usize = 200;
pub const ORTHO_PAIRS: usize = 1000;
pub const Z_ALPHAS: [f64; 6] = [0.0, 0.5, 1.0, 2.0, 4.0, 16.0];
const SEED: u64 = 0x5eed;

/// Deliberate defects used to check that the suite catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates `∂s/∂x` of the normalized inner product.
    NormInnerSign,
}

impl Fault {
    pub fn parse(s: &str) -> Option<Fault> {
        match s {
            "norm-inner-sign" => Some(Fault::NormInnerSign),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub rows: Vec<CheckRow>,
    pub seconds: f64,
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect()
    }

    pub fn table(&self) -> String {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
        let mut s = String::new();
        for r in &self.rows {
            let tag = if r.pass { "PASS" } else { "FAIL" };
            s.push_str(&format!("{tag}  {:<w$}  {}\n", r.name, r.detail));
        }
        s
    }

    fn push(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.rows.push(CheckRow {
            name: name.into(),
            pass,
            detail: detail.into(),
        });
    }

    fn push_result(&mut self, name: &str, r: Result<(bool, String)>) {
        match r {
            Ok((pass, detail)) => self.push(name, pass, detail),
            Err(e) => self.push(name, false, format!("error: {e}")),
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// A Gaussian vector at a random overall scale in `[0.1, 10]`.
fn scaled_gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let k = 10f64.powf(rng.gen_range(-1.0..1.0));
    gaussian(rng, n).into_iter().map(|v| v * k).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|a| a / n).collect()
}

fn grads(kind: MeasureKind, x: &[f64], y: &[f64], fault: Option<Fault>) -> Result<GradPair> {
    let mut g = analytic_grad(kind, x, y)?;
    if fault == Some(Fault::NormInnerSign) && kind == MeasureKind::NormInner {
        g.d_x.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(g)
}

/// Worst relative error of the analytic adjoints of `kind` against central
/// differences over random pairs.
pub fn measure_fd_error(kind: MeasureKind, dim: usize, pairs: usize, fault: Option<Fault>) -> Result<f64> {
    let mut rng = seed::rng(SEED, &format!("fd/{}/{dim}", kind.name()));
    let mut worst = 0f64;
    for _ in 0..pairs {
        let x = scaled_gaussian(&mut rng, dim);
        let y = scaled_gaussian(&mut rng, dim);
        let g = grads(kind, &x, &y, fault)?;
        let xy: Vec<f64> = x.iter().chain(&y).copied().collect();
        let numeric = central_differences(|p| measure(kind, &p[..dim], &p[dim..]), &xy, FD_STEP, None)?;
        let analytic: Vec<f64> = g.d_x.iter().chain(&g.d_y).copied().collect();
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Worst `|x·∂ψ/∂x| / (‖x‖‖∂ψ/∂x‖)` over random pairs.
pub fn measure_orthogonality(kind: MeasureKind, dim: usize, pairs: usize, fault: Option<Fault>) -> Result<f64> {
    let mut rng = seed::rng(SEED, &format!("ortho/{}/{dim}", kind.name()));
    let mut worst = 0f64;
    for _ in 0..pairs {
        let x = scaled_gaussian(&mut rng, dim);
        let y = scaled_gaussian(&mut rng, dim);
        let g = grads(kind, &x, &y, fault)?;
        for (v, gv) in [(&x, &g.d_x), (&y, &g.d_y)] {
            worst = worst.max(decompose(v, gv)?.parallel_ratio());
        }
    }
    Ok(worst)
}

/// Orthogonality of the input adjoint of `l2_normalize` to each row.
pub fn l2_normalize_orthogonality(rows: usize, dim: usize) -> Result<f64> {
    let mut rng = seed::rng(SEED, "ortho/l2");
    let x = Tensor::new(vec![rows, dim], scaled_gaussian(&mut rng, rows * dim))?;
    let seed_grad = Tensor::new(vec![rows, dim], gaussian(&mut rng, rows * dim))?;
    let mut tape = Tape::new();
    let v = tape.param(x.clone())?;
    let y = tape.l2_normalize(v, 1e-12)?;
    tape.backward_with(&[(y, seed_grad)])?;
    let g = tape.grad(v).expect("input requires grad");
    let mut worst = 0f64;
    for (xr, gr) in x.data().chunks(dim).zip(g.data().chunks(dim)) {
        worst = worst.max(decompose(xr, gr)?.parallel_ratio());
    }
    Ok(worst)
}

/// Orthogonality of the FRN input adjoint to each normalized feature map.
/// The offset `beta` has no input path; `eps` is 0 so the map is exactly
/// scale invariant.
pub fn frn_orthogonality(n: usize, c: usize, hw: usize) -> Result<f64> {
    let mut rng = seed::rng(SEED, "ortho/frn");
    let side = (hw as f64).sqrt() as usize;
    let shape = vec![n, c, side, side];
    let numel = n * c * side * side;
    let x = Tensor::new(shape.clone(), scaled_gaussian(&mut rng, numel))?;
    let mut tape = Tape::new();
    let v = tape.param(x.clone())?;
    let gamma = tape.param(Tensor::new(vec![c], gaussian(&mut rng, c))?)?;
    let beta = tape.param(Tensor::new(vec![c], gaussian(&mut rng, c))?)?;
    let y = tape.frn(v, gamma, beta, 0.0)?;
    tape.backward_with(&[(y, Tensor::new(shape, gaussian(&mut rng, numel))?)])?;
    let g = tape.grad(v).expect("input requires grad");
    let span = side * side;
    let mut worst = 0f64;
    for (xr, gr) in x.data().chunks(span).zip(g.data().chunks(span)) {
        worst = worst.max(decompose(xr, gr)?.parallel_ratio());
    }
    Ok(worst)
}

/// Interleaved pair batch of random unit and raw rows.
fn loss_fixture(rng: &mut ChaCha8Rng, pairs: usize, dim: usize) -> (Vec<f64>, Vec<f64>, Vec<u32>) {
    let mut u = Vec::new();
    let mut raw = Vec::new();
    let mut labels = Vec::new();
    for id in 0..pairs {
        let base = gaussian(rng, dim);
        for _ in 0..2 {
            let r: Vec<f64> = base.iter().map(|b| b + 0.6 * rng.sample::<f64, _>(StandardNormal)).collect();
            u.extend(unit(r.clone()));
            raw.extend(r);
            labels.push(id as u32);
        }
    }
    (u, raw, labels)
}

/// Worst relative error of the batch-loss adjoints (all variants) against
/// central differences in the unit and raw rows.
pub fn loss_fd_error(pairs: usize, dim: usize) -> Result<f64> {
    let mut rng = seed::rng(SEED, "fd/loss");
    let (u, raw, labels) = loss_fixture(&mut rng, pairs, dim);
    let mut worst = 0f64;
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
        let bl = batch_loss(&u, &raw, dim, &labels, &cfg)?;
        let nu = u.len();
        let flat: Vec<f64> = u.iter().chain(&raw).copied().collect();
        let numeric = central_differences(
            |p| Ok(batch_loss(&p[..nu], &p[nu..], dim, &labels, &cfg)?.total),
            &flat,
            FD_STEP,
            None,
        )?;
        let analytic: Vec<f64> = bl.grad_unit.iter().chain(&bl.grad_raw).copied().collect();
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn network_objective(net: &NetworkParams<f64>, input: &Tensor<f64>, wu: &Tensor<f64>, wr: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let f = net.forward_on_tape(&mut tape, input, Mode::Train)?;
    let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
    Ok(dot(tape.value(f.unit), wu) + dot(tape.value(f.raw), wr))
}

/// End-to-end check of a reduced network: random linear functionals of the
/// unit and raw descriptors, differentiated in every parameter tensor.
pub fn network_fd_error(norm: NormScheme, coords_per_tensor: usize) -> Result<f64> {
    let topo = Topology {
        input_size: 8,
        channels: [3, 3, 4, 4, 5, 5],
        descriptor_dim: 6,
    };
    let net: NetworkParams<f64> = init_topology(11, topo.clone(), norm)?;
    let mut rng = seed::rng(SEED, &format!("fd/net/{}", norm.name()));
    let n = 4;
    let input = Tensor::new(vec![n, 1, 8, 8], gaussian(&mut rng, n * 64))?;
    let wu = Tensor::new(vec![n, 6], gaussian(&mut rng, n * 6))?;
    let wr = Tensor::new(vec![n, 6], gaussian(&mut rng, n * 6))?;

    let mut tape = Tape::new();
    let f = net.forward_on_tape(&mut tape, &input, Mode::Train)?;
    tape.backward_with(&[(f.unit, wu.clone()), (f.raw, wr.clone())])?;
    let mut worst = 0f64;
    for (k, p) in net.params.iter().enumerate() {
        let analytic = tape
            .grad(f.params[k])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
        let m = p.tensor.numel();
        let coords: Vec<usize> = (0..coords_per_tensor.min(m)).map(|_| rng.gen_range(0..m)).collect();
        let numeric = central_differences(
            |v| {
                let mut probe = net.clone();
                probe.params[k].tensor.data_mut().copy_from_slice(v);
                network_objective(&probe, &input, &wu, &wr)
            },
            p.tensor.data(),
            FD_STEP,
            Some(&coords),
        )?;
        let (a, b): (Vec<f64>, Vec<f64>) = coords.iter().map(|&i| (analytic[i], numeric[i])).unzip();
        worst = worst.max(max_relative_error(&a, &b));
    }
    Ok(worst)
}

/// `max |d² − 2(1 − s)|` over random unit pairs.
pub fn chord_identity_error(pairs: usize, dim: usize) -> Result<f64> {
    let mut rng = seed::rng(SEED, "identity/chord");
    let mut worst = 0f64;
    for _ in 0..pairs {
        let x = unit(gaussian(&mut rng, dim));
        let y = unit(gaussian(&mut rng, dim));
        let s = measure(MeasureKind::NormInner, &x, &y)?;
        let d = measure(MeasureKind::NormL2, &x, &y)?;
        worst = worst.max((d * d - 2.0 * (1.0 - s)).abs());
    }
    Ok(worst)
}

fn grid(points: usize, hi: f64) -> Vec<f64> {
    (1..points).map(|i| hi * i as f64 / points as f64).collect()
}

/// `max |g_d(θ) − cos(θ/2)|` on a grid over `(0, π]`.
pub fn g_d_identity_error(points: usize) -> Result<f64> {
    let mut worst = 0f64;
    for t in grid(points, PI).into_iter().chain([PI]) {
        let g = magnitude_of_theta(MeasureKind::NormL2, Angle::new(t)?)?;
        worst = worst.max((g - (t / 2.0).cos()).abs());
    }
    Ok(worst)
}

/// Checks that `g_s` strictly increases and `g_d` strictly decreases on
/// `(0, π/2)`; returns the number of violations for each.
pub fn monotonicity_violations(points: usize) -> Result<(usize, usize)> {
    let ts = grid(points, PI / 2.0);
    let col = |k: MeasureKind| -> Result<Vec<f64>> { ts.iter().map(|&t| magnitude_of_theta(k, Angle::new(t)?)).collect() };
    let (gs, gd) = (col(MeasureKind::NormInner)?, col(MeasureKind::NormL2)?);
    let up = gs.windows(2).filter(|w| w[1] <= w[0]).count();
    let down = gd.windows(2).filter(|w| w[1] >= w[0]).count();
    Ok((up, down))
}

/// `max_θ g_H` on a dense grid for `alpha`.
pub fn hybrid_peak(alpha: f64, resolution: usize) -> Result<f64> {
    let c = magnitude_curves(&[alpha], resolution)?;
    Ok(c.g_h[0].iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Independent dense-grid maximum of `α sin θ + cos(θ/2)`.
pub fn grid_z(alpha: f64, points: usize) -> f64 {
    (0..=points)
        .map(|i| {
            let t = PI * i as f64 / points as f64;
            alpha * t.sin() + (t / 2.0).cos()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Runs every check.
pub fn run(fault: Option<Fault>) -> Report {
    let start = Instant::now();
    let mut r = Report::default();
    let kinds = MeasureKind::all(2.0).expect("alpha 2 is valid");

    for kind in kinds {
        let res = FD_DIMS.iter().try_fold(0f64, |w, &d| Ok(w.max(measure_fd_error(kind, d, FD_PAIRS, fault)?)));
        r.push_result(
            &format!("fd/{}", kind.name()),
            res.map(|e| (e < FD_TOL, format!("max rel err {e:.2e} < {FD_TOL:e}"))),
        );
    }
    r.push_result(
        "fd/batch-loss",
        loss_fd_error(6, 8).map(|e| (e < FD_TOL, format!("max rel err {e:.2e} < {FD_TOL:e}"))),
    );
    for norm in [NormScheme::Frn, NormScheme::Bn, NormScheme::In] {
        r.push_result(
            &format!("fd/network-{}", norm.name()),
            network_fd_error(norm, 6).map(|e| (e < NETWORK_TOL, format!("max rel err {e:.2e} < {NETWORK_TOL:e}"))),
        );
    }

    for kind in kinds.into_iter().filter(|k| k.is_normalized()) {
        r.push_result(
            &format!("orthogonal/{}", kind.name()),
            measure_orthogonality(kind, 128, ORTHO_PAIRS, fault)
                .map(|e| (e <= ORTHO_TOL, format!("max |x.g|/(|x||g|) {e:.2e} <= {ORTHO_TOL:e}"))),
        );
    }
    r.push_result(
        "orthogonal/l2_normalize",
        l2_normalize_orthogonality(ORTHO_PAIRS, 16).map(|e| (e <= ORTHO_TOL, format!("max ratio {e:.2e}"))),
    );
    r.push_result(
        "orthogonal/frn",
        frn_orthogonality(8, 16, 64).map(|e| (e <= ORTHO_TOL, format!("max ratio {e:.2e}"))),
    );

    r.push_result(
        "identity/chord",
        chord_identity_error(ORTHO_PAIRS, 128).map(|e| (e <= 1e-12, format!("max |d^2 - 2(1-s)| {e:.2e}"))),
    );
    r.push_result(
        "identity/g_d",
        g_d_identity_error(10_000).map(|e| (e <= 1e-12, format!("max |g_d - cos(t/2)| {e:.2e}"))),
    );
    match monotonicity_violations(10_000) {
        Ok((up, down)) => {
            r.push("monotone/g_s", up == 0, format!("{up} violations on (0, pi/2)"));
            r.push("monotone/g_d", down == 0, format!("{down} violations on (0, pi/2)"));
        }
        Err(e) => r.push("monotone", false, format!("error: {e}")),
    }

    for alpha in Z_ALPHAS {
        r.push_result(
            &format!("z/peak-alpha-{alpha}"),
            hybrid_peak(alpha, 200_000).map(|p| ((p - 1.0).abs() <= 1e-6, format!("max g_H {p:.9}"))),
        );
    }
    r.push_result(
        "z/grid-alpha-2",
        compute_z(2.0).map(|z| {
            let g = grid_z(2.0, 1_000_000);
            let rel = (z - g).abs() / g;
            (rel <= 1e-4, format!("Z {z:.6} vs grid {g:.6} (rel {rel:.1e})"))
        }),
    );
    r.seconds = start.elapsed().as_secs_f64();
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_is_caught_by_name() {
        let e = measure_fd_error(MeasureKind::NormInner, 8, 5, Some(Fault::NormInnerSign)).unwrap();
        assert!(e > 1e-3);
        let e = measure_fd_error(MeasureKind::NormInner, 8, 5, None).unwrap();
        assert!(e < FD_TOL);
    }

    #[test]
    fn grid_z_brackets_the_refined_value() {
        let z = compute_z(2.0).unwrap();
        assert!(grid_z(2.0, 1000) <= z);
        assert!((z - 2.735815).abs() < 1e-5);
    }
}
