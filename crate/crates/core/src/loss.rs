//! Triplet objectives with in-batch hardest-negative mining.
//!
//! Batches are laid out as identity pairs: rows `2i` and `2i + 1` are the
//! two patches of the `i`-th identity. For each pair the negative is the
//! row of another identity closest (normalized-L2) to either member; the
//! member it is closest to becomes the triplet's anchor.
//!
//! Losses are evaluated in closed form from cosines `c = u·v` of the given
//! unit rows, and their gradients with respect to the unit and raw
//! descriptor matrices are returned for seeding a tape.

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::simgeo::{compute_z, hybrid_of_theta, Angle};

/// Pairs closer than this are left out of the gradient (the distance
/// derivative is singular there).
pub const DISTANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVariant {
    /// Hinge on the hybrid similarity `s_H`.
    Hybrid,
    /// Hinge on `1 − s`.
    PureS,
    /// Hinge on `d`.
    PureD,
    /// `max(0, m_A + s(θ⁺) − d(θ⁻))`.
    LossA,
    /// `α·max(0, m_B1 + s(θ⁺) − s(θ⁻)) + max(0, m_B2 + d(θ⁺) − d(θ⁻))`.
    LossB,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Hybrid => "hybrid",
            LossVariant::PureS => "pure-s",
            LossVariant::PureD => "pure-d",
            LossVariant::LossA => "loss-a",
            LossVariant::LossB => "loss-b",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            LossVariant::Hybrid,
            LossVariant::PureS,
            LossVariant::PureD,
            LossVariant::LossA,
            LossVariant::LossB,
        ]
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| Error::invalid(format!("unknown loss variant {s:?}")))
    }
}

/// How `s` enters the `LossA`/`LossB` hinges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignConvention {
    /// `s` used as written.
    Printed,
    /// `s` replaced by `1 − s`, so every hinge term grows with θ⁺ and
    /// shrinks with θ⁻.
    Corrected,
}

impl SignConvention {
    pub fn name(self) -> &'static str {
        match self {
            SignConvention::Printed => "printed",
            SignConvention::Corrected => "corrected",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "printed" => Ok(SignConvention::Printed),
            "corrected" => Ok(SignConvention::Corrected),
            _ => Err(Error::invalid(format!("unknown sign convention {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub margin: f64,
    pub gamma_reg: f64,
    pub variant: LossVariant,
    pub m_a: f64,
    pub m_b1: f64,
    pub m_b2: f64,
    pub margin_pure_s: f64,
    pub margin_pure_d: f64,
    pub sign: SignConvention,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 2.0,
            margin: 1.2,
            gamma_reg: 0.1,
            variant: LossVariant::Hybrid,
            m_a: 1.0,
            m_b1: 0.9,
            m_b2: 1.2,
            margin_pure_s: 0.85,
            margin_pure_d: 1.0,
            sign: SignConvention::Printed,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        for (name, m) in [
            ("margin", self.margin),
            ("m_a", self.m_a),
            ("m_b1", self.m_b1),
            ("m_b2", self.m_b2),
            ("margin_pure_s", self.margin_pure_s),
            ("margin_pure_d", self.margin_pure_d),
        ] {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::invalid(format!("{name} must be > 0, got {m}")));
            }
        }
        if !(self.gamma_reg.is_finite() && self.gamma_reg >= 0.0) {
            return Err(Error::invalid(format!("gamma_reg must be >= 0, got {}", self.gamma_reg)));
        }
        Ok(())
    }
}

/// One mined triplet. `anchor` is the pair member the negative is closest to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletIndices {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub theta_pos: Angle,
    pub theta_neg: Angle,
}

/// Function of the angle entering a hinge.
#[derive(Clone, Copy, Debug)]
enum Term {
    Hybrid { alpha: f64, z: f64 },
    OneMinusCos,
    Cos,
    Chord,
}

impl Term {
    fn of_theta(self, angle: Angle) -> f64 {
        let theta = angle.radians();
        let half = (theta / 2.0).sin();
        match self {
            Term::Hybrid { alpha, z } => hybrid_of_theta(angle, alpha, z),
            Term::OneMinusCos => 2.0 * half * half,
            Term::Cos => theta.cos(),
            Term::Chord => 2.0 * half,
        }
    }

    fn of_cos(self, c: f64) -> f64 {
        let chord = (2.0 - 2.0 * c).max(0.0).sqrt();
        match self {
            Term::Hybrid { alpha, z } => (alpha * (1.0 - c) + chord) / z,
            Term::OneMinusCos => 1.0 - c,
            Term::Cos => c,
            Term::Chord => chord,
        }
    }

    /// Derivative with respect to the cosine; `None` where the chord is
    /// below the distance floor.
    fn slope(self, c: f64) -> Option<f64> {
        let chord = (2.0 - 2.0 * c).max(0.0).sqrt();
        match self {
            Term::Hybrid { alpha, z } => (chord >= DISTANCE_FLOOR).then(|| (-alpha - 1.0 / chord) / z),
            Term::OneMinusCos => Some(-1.0),
            Term::Cos => Some(1.0),
            Term::Chord => (chord >= DISTANCE_FLOOR).then(|| -1.0 / chord),
        }
    }
}

/// `weight · max(0, margin + pos(θ⁺) − neg(θ⁻))`
#[derive(Clone, Copy, Debug)]
struct Hinge {
    weight: f64,
    margin: f64,
    pos: Term,
    neg: Term,
}

fn hinges(cfg: &LossConfig) -> Result<Vec<Hinge>> {
    cfg.validate()?;
    let s = match cfg.sign {
        SignConvention::Printed => Term::Cos,
        SignConvention::Corrected => Term::OneMinusCos,
    };
    let h = |weight, margin, pos, neg| Hinge {
        weight,
        margin,
        pos,
        neg,
    };
    Ok(match cfg.variant {
        LossVariant::Hybrid => {
            let t = Term::Hybrid {
                alpha: cfg.alpha,
                z: compute_z(cfg.alpha)?,
            };
            vec![h(1.0, cfg.margin, t, t)]
        }
        LossVariant::PureS => vec![h(1.0, cfg.margin_pure_s, Term::OneMinusCos, Term::OneMinusCos)],
        LossVariant::PureD => vec![h(1.0, cfg.margin_pure_d, Term::Chord, Term::Chord)],
        LossVariant::LossA => vec![h(1.0, cfg.m_a, s, Term::Chord)],
        LossVariant::LossB => vec![h(cfg.alpha, cfg.m_b1, s, s), h(1.0, cfg.m_b2, Term::Chord, Term::Chord)],
    })
}

/// `max(0, margin + pos − neg)`
pub fn hinge(margin: f64, pos: f64, neg: f64) -> f64 {
    (margin + pos - neg).max(0.0)
}

fn mean_hinges(triplets: &[TripletIndices], hs: &[Hinge]) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    let total: f64 = triplets
        .iter()
        .map(|t| {
            let (tp, tn) = (t.theta_pos, t.theta_neg);
            hs.iter()
                .map(|h| h.weight * hinge(h.margin, h.pos.of_theta(tp), h.neg.of_theta(tn)))
                .sum::<f64>()
        })
        .sum();
    total / triplets.len() as f64
}

/// Mean hybrid hinge over the triplets' angles (ignores `cfg.variant`).
pub fn triplet_hybrid_loss(triplets: &[TripletIndices], cfg: &LossConfig) -> Result<f64> {
    let cfg = LossConfig {
        variant: LossVariant::Hybrid,
        ..cfg.clone()
    };
    Ok(mean_hinges(triplets, &hinges(&cfg)?))
}

/// Mean hinge of `cfg.variant` over the triplets' angles.
pub fn triplet_loss(triplets: &[TripletIndices], cfg: &LossConfig) -> Result<f64> {
    Ok(mean_hinges(triplets, &hinges(cfg)?))
}

/// `(L_A, L_B)` under `cfg.sign`.
pub fn loss_variants_ab(triplets: &[TripletIndices], cfg: &LossConfig) -> Result<(f64, f64)> {
    let a = LossConfig {
        variant: LossVariant::LossA,
        ..cfg.clone()
    };
    let b = LossConfig {
        variant: LossVariant::LossB,
        ..cfg.clone()
    };
    Ok((triplet_loss(triplets, &a)?, triplet_loss(triplets, &b)?))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean squared difference of positive-pair raw norms.
pub fn r_l2(raw_pairs: &[(&[f64], &[f64])]) -> f64 {
    if raw_pairs.is_empty() {
        return 0.0;
    }
    raw_pairs
        .iter()
        .map(|(a, b)| (norm(a) - norm(b)).powi(2))
        .sum::<f64>()
        / raw_pairs.len() as f64
}

/// `L_triplet + gamma_reg · R_L2` for `cfg.variant`.
pub fn overall_loss(triplets: &[TripletIndices], raw_pairs: &[(&[f64], &[f64])], cfg: &LossConfig) -> Result<f64> {
    Ok(triplet_loss(triplets, cfg)? + cfg.gamma_reg * r_l2(raw_pairs))
}

/// Number of identity pairs in an interleaved batch, after checking labels.
fn pair_count(labels: &[u32]) -> Result<usize> {
    if labels.len() % 2 != 0 {
        return Err(Error::invalid("batch must hold one pair per identity"));
    }
    let n = labels.len() / 2;
    if n < 2 {
        return Err(Error::invalid("mining needs at least two identities"));
    }
    let mut seen = std::collections::HashSet::new();
    for i in 0..n {
        if labels[2 * i] != labels[2 * i + 1] {
            return Err(Error::invalid(format!("rows {} and {} are not a matching pair", 2 * i, 2 * i + 1)));
        }
        if !seen.insert(labels[2 * i]) {
            return Err(Error::invalid(format!("identity {} appears in two pairs", labels[2 * i])));
        }
    }
    Ok(n)
}

/// Row-major Gram matrix of the rows of `m` (`rows × dim`).
fn gram(m: &[f64], rows: usize, dim: usize) -> Vec<f64> {
    use crate::autodiff::{gemm, MatLayout};
    let mut g = vec![0.0; rows * rows];
    let l = MatLayout::row_major(rows, dim);
    gemm(1.0, m, l, m, l.t(), 0.0, &mut g);
    g
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.f64()).collect()
}

/// Hardest-in-batch triplets for an interleaved pair batch of unit rows.
///
/// Among rows of other identities, the negative minimizes the distance to
/// either pair member; ties go to the lowest row, then to the first member.
pub fn mine_triplets<T: Real>(unit: &[T], dim: usize, labels: &[u32]) -> Result<Vec<TripletIndices>> {
    if dim == 0 || unit.len() != labels.len() * dim {
        return Err(Error::invalid("descriptor matrix does not match label count"));
    }
    let u = to_f64(unit);
    let g = gram(&u, labels.len(), dim);
    mine_from_gram(&g, labels)
}

fn mine_from_gram(g: &[f64], labels: &[u32]) -> Result<Vec<TripletIndices>> {
    let n = pair_count(labels)?;
    let rows = labels.len();
    let dist2 = |i: usize, j: usize| (2.0 - 2.0 * g[i * rows + j]).max(0.0);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (a, p) = (2 * i, 2 * i + 1);
        let mut best: Option<(f64, usize, usize)> = None;
        for j in 0..rows {
            if labels[j] == labels[a] {
                continue;
            }
            for side in [a, p] {
                let d = dist2(side, j);
                if best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, side, j));
                }
            }
        }
        let (_, anchor, negative) = best.expect("at least two identities");
        let positive = if anchor == a { p } else { a };
        out.push(TripletIndices {
            anchor,
            positive,
            negative,
            theta_pos: Angle::from_cos(g[a * rows + p]),
            theta_neg: Angle::from_cos(g[anchor * rows + negative]),
        });
    }
    Ok(out)
}

/// Loss value and descriptor gradients for one interleaved batch.
#[derive(Clone, Debug)]
pub struct BatchLoss<T> {
    pub triplet: f64,
    pub r_l2: f64,
    pub total: f64,
    /// `∂L/∂unit`, same layout as the unit matrix.
    pub grad_unit: Vec<T>,
    /// `∂L/∂raw`, same layout as the raw matrix.
    pub grad_raw: Vec<T>,
    pub triplets: Vec<TripletIndices>,
}

/// Mines, evaluates `L_triplet + γ R_L2` and differentiates it with respect
/// to the unit rows (triplet part) and the raw rows (regularizer).
///
/// The triplet part treats the unit rows as given vectors: cosines are the
/// plain dot products of the rows.
pub fn batch_loss<T: Real>(unit: &[T], raw: &[T], dim: usize, labels: &[u32], cfg: &LossConfig) -> Result<BatchLoss<T>> {
    if unit.len() != raw.len() || dim == 0 || unit.len() != labels.len() * dim {
        return Err(Error::invalid("unit and raw matrices must both be rows x dim"));
    }
    let hs = hinges(cfg)?;
    let rows = labels.len();
    let u = to_f64(unit);
    let g = gram(&u, rows, dim);
    let triplets = mine_from_gram(&g, labels)?;
    let n = triplets.len() as f64;

    let mut gu = vec![0.0f64; u.len()];
    let add = |gu: &mut [f64], i: usize, j: usize, k: f64| {
        for d in 0..dim {
            gu[i * dim + d] += k * u[j * dim + d];
            gu[j * dim + d] += k * u[i * dim + d];
        }
    };
    let mut triplet = 0.0;
    for t in &triplets {
        let cp = g[t.anchor * rows + t.positive];
        let cn = g[t.anchor * rows + t.negative];
        for h in &hs {
            let v = h.margin + h.pos.of_cos(cp) - h.neg.of_cos(cn);
            if v <= 0.0 {
                continue;
            }
            triplet += h.weight * v / n;
            if let Some(s) = h.pos.slope(cp) {
                add(&mut gu, t.anchor, t.positive, h.weight * s / n);
            }
            if let Some(s) = h.neg.slope(cn) {
                add(&mut gu, t.anchor, t.negative, -h.weight * s / n);
            }
        }
    }

    let r = to_f64(raw);
    let pairs = rows / 2;
    let mut gr = vec![0.0f64; r.len()];
    let mut reg = 0.0;
    for i in 0..pairs {
        let (a, p) = (2 * i, 2 * i + 1);
        let na = norm(&r[a * dim..(a + 1) * dim]);
        let np = norm(&r[p * dim..(p + 1) * dim]);
        let diff = na - np;
        reg += diff * diff / pairs as f64;
        let k = cfg.gamma_reg * 2.0 * diff / pairs as f64;
        if k != 0.0 {
            if na > 0.0 {
                for d in 0..dim {
                    gr[a * dim + d] += k * r[a * dim + d] / na;
                }
            }
            if np > 0.0 {
                for d in 0..dim {
                    gr[p * dim + d] -= k * r[p * dim + d] / np;
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::lit).collect::<Vec<T>>();
    Ok(BatchLoss {
        triplet,
        r_l2: reg,
        total: triplet + cfg.gamma_reg * reg,
        grad_unit: cast(gu),
        grad_raw: cast(gr),
        triplets,
    })
}
