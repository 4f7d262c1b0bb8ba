//! Similarity-measure calculus for descriptor pairs.
//!
//! Five measures are supported: the raw inner product `s̄ = xᵀy`, the
//! normalized inner product `s = xᵀy/(‖x‖‖y‖)`, the raw distance
//! `d̄ = ‖x − y‖`, the normalized distance `d = ‖x/‖x‖ − y/‖y‖‖` and the
//! hybrid measure `s_H = (α(1 − s) + d)/Z`. Normalization is part of the
//! measure, so the `Norm*` kinds accept unnormalized inputs.
//!
//! On the unit sphere every normalized measure is a function of the angle θ
//! between the descriptors; the magnitude of its θ-derivative is what the
//! `magnitude_of_theta` family reports.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Mutex, OnceLock};

use crate::error::{Error, Result};

/// Below this normalized distance the L2 gradients have no defined direction.
pub const MIN_DISTANCE: f64 = 1e-12;

const Z_GRID: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MeasureKind {
    RawInner,
    NormInner,
    RawL2,
    NormL2,
    Hybrid { alpha: f64, z: f64 },
}

impl MeasureKind {
    /// Hybrid measure with `Z` computed for `alpha`.
    pub fn hybrid(alpha: f64) -> Result<Self> {
        Ok(MeasureKind::Hybrid {
            alpha,
            z: compute_z(alpha)?,
        })
    }

    /// The four basic kinds followed by the hybrid for `alpha`.
    pub fn all(alpha: f64) -> Result<[MeasureKind; 5]> {
        Ok([
            MeasureKind::RawInner,
            MeasureKind::NormInner,
            MeasureKind::RawL2,
            MeasureKind::NormL2,
            MeasureKind::hybrid(alpha)?,
        ])
    }

    pub fn name(&self) -> &'static str {
        match self {
            MeasureKind::RawInner => "RawInner",
            MeasureKind::NormInner => "NormInner",
            MeasureKind::RawL2 => "RawL2",
            MeasureKind::NormL2 => "NormL2",
            MeasureKind::Hybrid { .. } => "Hybrid",
        }
    }

    pub fn is_normalized(&self) -> bool {
        !matches!(self, MeasureKind::RawInner | MeasureKind::RawL2)
    }
}

/// Adjoints `∂ψ/∂x` and `∂ψ/∂y` of a measure.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPair {
    pub d_x: Vec<f64>,
    pub d_y: Vec<f64>,
}

/// An angle in `[0, π]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Angle(f64);

impl Angle {
    pub fn new(theta: f64) -> Result<Self> {
        if !(0.0..=PI).contains(&theta) {
            return Err(Error::invalid(format!("angle {theta} outside [0, π]")));
        }
        Ok(Angle(theta))
    }

    pub fn radians(self) -> f64 {
        self.0
    }

    /// Angle whose cosine is `c`, clamped into `[-1, 1]` first.
    pub fn from_cos(c: f64) -> Self {
        Angle(c.clamp(-1.0, 1.0).acos())
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "descriptor dimensions differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::invalid("empty descriptors"));
    }
    Ok(())
}

fn nonzero_norms(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::invalid("zero-norm descriptor for a normalized measure"));
    }
    Ok((nx, ny))
}

fn normalized_distance(x: &[f64], y: &[f64], nx: f64, ny: f64) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let d = a / nx - b / ny;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Value of `kind` for the pair `(x, y)`.
pub fn measure(kind: MeasureKind, x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    Ok(match kind {
        MeasureKind::RawInner => dot(x, y),
        MeasureKind::RawL2 => x
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt(),
        MeasureKind::NormInner => {
            let (nx, ny) = nonzero_norms(x, y)?;
            dot(x, y) / (nx * ny)
        }
        MeasureKind::NormL2 => {
            let (nx, ny) = nonzero_norms(x, y)?;
            normalized_distance(x, y, nx, ny)
        }
        MeasureKind::Hybrid { alpha, z } => {
            let (nx, ny) = nonzero_norms(x, y)?;
            let s = dot(x, y) / (nx * ny);
            let d = normalized_distance(x, y, nx, ny);
            (alpha * (1.0 - s) + d) / z
        }
    })
}

/// Closed-form partial derivatives of `kind` at `(x, y)`.
pub fn analytic_grad(kind: MeasureKind, x: &[f64], y: &[f64]) -> Result<GradPair> {
    check_pair(x, y)?;
    match kind {
        MeasureKind::RawInner => Ok(GradPair {
            d_x: y.to_vec(),
            d_y: x.to_vec(),
        }),
        MeasureKind::RawL2 => {
            let dbar = measure(kind, x, y)?;
            if dbar == 0.0 {
                return Err(Error::DegenerateGradient("coincident descriptors for RawL2".into()));
            }
            Ok(GradPair {
                d_x: x.iter().zip(y).map(|(a, b)| (a - b) / dbar).collect(),
                d_y: x.iter().zip(y).map(|(a, b)| (b - a) / dbar).collect(),
            })
        }
        MeasureKind::NormInner => {
            let (nx, ny) = nonzero_norms(x, y)?;
            Ok(norm_inner_grad(x, y, nx, ny))
        }
        MeasureKind::NormL2 => {
            let (nx, ny) = nonzero_norms(x, y)?;
            norm_l2_grad(x, y, nx, ny)
        }
        MeasureKind::Hybrid { alpha, z } => {
            let (nx, ny) = nonzero_norms(x, y)?;
            let gs = norm_inner_grad(x, y, nx, ny);
            let gd = norm_l2_grad(x, y, nx, ny)?;
            let comb = |s: &[f64], d: &[f64]| -> Vec<f64> {
                s.iter().zip(d).map(|(s, d)| (d - alpha * s) / z).collect()
            };
            Ok(GradPair {
                d_x: comb(&gs.d_x, &gd.d_x),
                d_y: comb(&gs.d_y, &gd.d_y),
            })
        }
    }
}

fn norm_inner_grad(x: &[f64], y: &[f64], nx: f64, ny: f64) -> GradPair {
    let xy = dot(x, y);
    let k = 1.0 / (nx * ny);
    let (cx, cy) = (xy / (nx * nx), xy / (ny * ny));
    GradPair {
        d_x: x.iter().zip(y).map(|(a, b)| k * (b - cx * a)).collect(),
        d_y: x.iter().zip(y).map(|(a, b)| k * (a - cy * b)).collect(),
    }
}

fn norm_l2_grad(x: &[f64], y: &[f64], nx: f64, ny: f64) -> Result<GradPair> {
    let d = normalized_distance(x, y, nx, ny);
    if d < MIN_DISTANCE {
        return Err(Error::DegenerateGradient(
            "parallel descriptors for a normalized distance".into(),
        ));
    }
    let xy = dot(x, y);
    let k = 1.0 / (d * nx * ny);
    let (cx, cy) = (xy / (nx * nx), xy / (ny * ny));
    Ok(GradPair {
        d_x: x.iter().zip(y).map(|(a, b)| k * (cx * a - b)).collect(),
        d_y: x.iter().zip(y).map(|(a, b)| k * (cy * b - a)).collect(),
    })
}

/// `g_d(θ) = |sin θ / √(2(1 − cos θ))|`, evaluated with `√(2(1 − cos θ)) = 2 sin(θ/2)`.
fn distance_slope(theta: f64) -> f64 {
    (theta.sin() / (2.0 * (theta / 2.0).sin())).abs()
}

/// Magnitude of the θ-derivative of a normalized measure.
pub fn magnitude_of_theta(kind: MeasureKind, theta: Angle) -> Result<f64> {
    let t = theta.radians();
    match kind {
        MeasureKind::NormInner => Ok(t.sin().abs()),
        MeasureKind::NormL2 | MeasureKind::Hybrid { .. } if t == 0.0 => Err(Error::Singularity(format!(
            "{} gradient direction undefined at θ = 0",
            kind.name()
        ))),
        MeasureKind::NormL2 => Ok(distance_slope(t)),
        MeasureKind::Hybrid { alpha, z } => Ok((alpha * t.sin() + distance_slope(t)).abs() / z),
        MeasureKind::RawInner | MeasureKind::RawL2 => Err(Error::invalid(format!(
            "{} is not a function of the angle alone",
            kind.name()
        ))),
    }
}

/// `s_H(θ) = (α(1 − cos θ) + √(2(1 − cos θ)))/Z`.
pub fn hybrid_of_theta(theta: Angle, alpha: f64, z: f64) -> f64 {
    let half = (theta.radians() / 2.0).sin();
    (alpha * 2.0 * half * half + 2.0 * half) / z
}

/// Angle between two nonzero vectors.
pub fn angle_between(x: &[f64], y: &[f64]) -> Result<Angle> {
    check_pair(x, y)?;
    let (nx, ny) = nonzero_norms(x, y)?;
    Ok(Angle::from_cos(dot(x, y) / (nx * ny)))
}

fn unnormalized_hybrid_slope(alpha: f64, theta: f64) -> f64 {
    alpha * theta.sin() + (theta / 2.0).cos()
}

fn z_cache() -> &'static Mutex<HashMap<u64, f64>> {
    static CACHE: OnceLock<Mutex<HashMap<u64, f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Normalizing factor of the hybrid measure: the supremum over θ ∈ (0, π] of
/// `α sin θ + cos(θ/2)`, so that the hybrid gradient magnitude peaks at 1.
///
/// Found by a dense grid followed by golden-section refinement; cached per α.
pub fn compute_z(alpha: f64) -> Result<f64> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::invalid(format!("alpha must be finite and ≥ 0, got {alpha}")));
    }
    let key = alpha.to_bits();
    if let Some(&z) = z_cache().lock().expect("z cache poisoned").get(&key) {
        return Ok(z);
    }
    let f = |t: f64| unnormalized_hybrid_slope(alpha, t);
    // The slope is continuous on [0, π]; its supremum over the half-open
    // interval equals the maximum over the closed one.
    let step = PI / Z_GRID as f64;
    let (mut best_i, mut best) = (0, f(0.0));
    for i in 1..=Z_GRID {
        let v = f(i as f64 * step);
        if v > best {
            best = v;
            best_i = i;
        }
    }
    let lo = best_i.saturating_sub(1) as f64 * step;
    let hi = ((best_i + 1).min(Z_GRID)) as f64 * step;
    let refined = f(golden_max(f, lo, hi, 1e-13));
    let z = best.max(refined);
    z_cache().lock().expect("z cache poisoned").insert(key, z);
    Ok(z)
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}
