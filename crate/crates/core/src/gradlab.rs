//! Analysis tools: gradient decompositions, θ distributions of mined
//! triplets and gradient-magnitude curves.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::Real;
use crate::data::PatchBatch;
use crate::error::{Error, Result};
use crate::loss::mine_triplets;
use crate::net::NetworkParams;
use crate::seed;
use crate::simgeo::{analytic_grad, magnitude_of_theta, Angle, MeasureKind};
use crate::train::sample_batch;

/// A gradient split into its components along and across a descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientDecomposition {
    pub parallel: Vec<f64>,
    pub orthogonal: Vec<f64>,
    pub parallel_norm: f64,
    pub orthogonal_norm: f64,
}

impl GradientDecomposition {
    /// `‖Δ∥‖ / ‖Δ‖`, zero for a zero gradient.
    pub fn parallel_ratio(&self) -> f64 {
        let total = self.parallel_norm.hypot(self.orthogonal_norm);
        if total == 0.0 {
            0.0
        } else {
            self.parallel_norm / total
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Projects `grad` onto `x` and its orthogonal complement.
pub fn decompose(x: &[f64], grad: &[f64]) -> Result<GradientDecomposition> {
    if x.len() != grad.len() {
        return Err(Error::invalid(format!(
            "decompose: vector has {} entries, gradient {}",
            x.len(),
            grad.len()
        )));
    }
    let xx: f64 = x.iter().map(|a| a * a).sum();
    if xx == 0.0 || !xx.is_finite() {
        return Err(Error::invalid("decompose: descriptor must be nonzero and finite"));
    }
    let k = x.iter().zip(grad).map(|(a, g)| a * g).sum::<f64>() / xx;
    let parallel: Vec<f64> = x.iter().map(|a| k * a).collect();
    let orthogonal: Vec<f64> = grad.iter().zip(&parallel).map(|(g, p)| g - p).collect();
    Ok(GradientDecomposition {
        parallel_norm: norm(&parallel),
        orthogonal_norm: norm(&orthogonal),
        parallel,
        orthogonal,
    })
}

/// Summary of parallel ratios of `∂ψ/∂x` over random pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionAudit {
    pub kind: MeasureKind,
    pub pairs: usize,
    pub max_ratio: f64,
    pub min_ratio: f64,
    pub mean_ratio: f64,
}

/// Decomposes the analytic `∂ψ/∂x` of `kind` for `pairs` Gaussian pairs of
/// dimension `dim`.
pub fn decomposition_audit(kind: MeasureKind, pairs: usize, dim: usize, seed: u64) -> Result<DecompositionAudit> {
    if pairs == 0 || dim < 2 {
        return Err(Error::invalid("audit needs at least one pair of dimension ≥ 2"));
    }
    let mut rng = seed::rng(seed, "audit");
    let (mut max, mut min, mut sum) = (0f64, f64::INFINITY, 0.0);
    for _ in 0..pairs {
        let x: Vec<f64> = (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let y: Vec<f64> = (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let g = analytic_grad(kind, &x, &y)?;
        let r = decompose(&x, &g.d_x)?.parallel_ratio();
        max = max.max(r);
        min = min.min(r);
        sum += r;
    }
    Ok(DecompositionAudit {
        kind,
        pairs,
        max_ratio: max,
        min_ratio: min,
        mean_ratio: sum / pairs as f64,
    })
}

/// Histogram of θ⁺ and θ⁻ over `[0, π]`, keeping the samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaHistogram {
    pub edges: Vec<f64>,
    pub count_pos: Vec<u64>,
    pub count_neg: Vec<u64>,
    pub theta_pos: Vec<f64>,
    pub theta_neg: Vec<f64>,
    pub source: String,
}

pub const HISTOGRAM_HEADER: &str = "bin_lo,bin_hi,count_pos,count_neg";

impl ThetaHistogram {
    /// Bins the given angles into `bins` equal slices of `[0, π]`; the last
    /// bin is closed.
    pub fn from_angles(theta_pos: Vec<f64>, theta_neg: Vec<f64>, bins: usize, source: impl Into<String>) -> Result<Self> {
        if bins == 0 {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        if let Some(t) = theta_pos.iter().chain(&theta_neg).find(|t| !(0.0..=PI).contains(*t)) {
            return Err(Error::invalid(format!("angle {t} outside [0, π]")));
        }
        let edges: Vec<f64> = (0..=bins).map(|i| PI * i as f64 / bins as f64).collect();
        let bin = |t: f64| ((t / PI * bins as f64) as usize).min(bins - 1);
        let count = |v: &[f64]| {
            let mut c = vec![0u64; bins];
            v.iter().for_each(|&t| c[bin(t)] += 1);
            c
        };
        Ok(ThetaHistogram {
            count_pos: count(&theta_pos),
            count_neg: count(&theta_neg),
            edges,
            theta_pos,
            theta_neg,
            source: source.into(),
        })
    }

    pub fn bins(&self) -> usize {
        self.count_pos.len()
    }

    /// Fraction of all recorded angles (θ⁺ and θ⁻ together) that are `≤ limit`.
    pub fn fraction_at_most(&self, limit: f64) -> f64 {
        let n = self.theta_pos.len() + self.theta_neg.len();
        if n == 0 {
            return 0.0;
        }
        let k = self.theta_pos.iter().chain(&self.theta_neg).filter(|&&t| t <= limit).count();
        k as f64 / n as f64
    }

    /// Kolmogorov–Smirnov distance between the θ⁺ and θ⁻ samples.
    pub fn separation(&self) -> f64 {
        ks_distance(&self.theta_pos, &self.theta_neg)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{HISTOGRAM_HEADER}\n");
        for i in 0..self.bins() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                self.edges[i],
                self.edges[i + 1],
                self.count_pos[i],
                self.count_neg[i]
            );
        }
        s
    }
}

fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut best) = (0, 0, 0f64);
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        best = best.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    best
}

/// Mined θ distribution of `net` on `num_batches` random batches of
/// `batch_identities` pairs.
pub fn theta_histogram<T: Real>(
    net: &NetworkParams<T>,
    dataset: &PatchBatch,
    num_batches: usize,
    batch_identities: usize,
    bins: usize,
    seed: u64,
) -> Result<ThetaHistogram> {
    if num_batches == 0 || batch_identities < 2 {
        return Err(Error::invalid("histogram needs ≥ 1 batch of ≥ 2 identities"));
    }
    let mut rng = seed::rng(seed, "histogram");
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    let dim = net.topology.descriptor_dim;
    for _ in 0..num_batches {
        let batch = sample_batch(dataset, &mut rng, batch_identities)?;
        let idx: Vec<usize> = (0..batch.len()).collect();
        let (_, unit) = net.describe(&batch, &idx)?;
        for t in mine_triplets(&unit, dim, &batch.identity)? {
            pos.push(t.theta_pos.radians());
            neg.push(t.theta_neg.radians());
        }
    }
    let source = format!(
        "{} net, hardest-in-batch mining, {num_batches} batches of {batch_identities} pairs",
        net.norm.name()
    );
    ThetaHistogram::from_angles(pos, neg, bins, source)
}

/// `g_s`, `g_d` and `g_H` for several α on `θ_i = π(i+1)/resolution`.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeCurves {
    pub alphas: Vec<f64>,
    pub theta: Vec<f64>,
    pub g_s: Vec<f64>,
    pub g_d: Vec<f64>,
    /// One column per α.
    pub g_h: Vec<Vec<f64>>,
}

pub fn magnitude_curves(alphas: &[f64], resolution: usize) -> Result<MagnitudeCurves> {
    if resolution < 2 {
        return Err(Error::invalid("resolution must be at least 2"));
    }
    let kinds = alphas
        .iter()
        .map(|&a| MeasureKind::hybrid(a))
        .collect::<Result<Vec<_>>>()?;
    let theta: Vec<f64> = (0..resolution).map(|i| PI * (i + 1) as f64 / resolution as f64).collect();
    let column = |kind: MeasureKind| -> Result<Vec<f64>> {
        theta.iter().map(|&t| magnitude_of_theta(kind, Angle::new(t)?)).collect()
    };
    Ok(MagnitudeCurves {
        g_s: column(MeasureKind::NormInner)?,
        g_d: column(MeasureKind::NormL2)?,
        g_h: kinds.into_iter().map(column).collect::<Result<_>>()?,
        alphas: alphas.to_vec(),
        theta,
    })
}

impl MagnitudeCurves {
    pub fn header(&self) -> String {
        let mut h = String::from("theta,g_s,g_d");
        for a in &self.alphas {
            let _ = write!(h, ",g_H_{a}");
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        for i in 0..self.theta.len() {
            let _ = write!(s, "{},{},{}", self.theta[i], self.g_s[i], self.g_d[i]);
            for col in &self.g_h {
                let _ = write!(s, ",{}", col[i]);
            }
            s.push('\n');
        }
        s
    }
}
