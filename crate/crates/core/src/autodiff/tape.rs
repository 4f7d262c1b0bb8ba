//! Wengert tape for reverse-mode differentiation.
//!
//! Nodes are appended in execution order and only ever reference earlier
//! nodes, so a reverse sweep over the node list is a valid topological order
//! and visits each node once.

use super::conv::{self, ConvGeom};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    MatVec(Var, Var),
    Sum(Var),
    Mean(Var),
    Sqrt(Var),
    Clamp { x: Var, lo: T, hi: T },
    Relu(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    L2Normalize { x: Var, dim: usize, norms: Vec<T>, eps: T },
    Frn { x: Var, gamma: Var, beta: Var, inv: Vec<T> },
    Tlu { x: Var, tau: Var },
    Standardize { x: Var, per_sample: bool, inv_std: Vec<T> },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    FixedChannelAffine { x: Var, scale: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatVec(..) => "matvec",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Sqrt(..) => "sqrt",
            Op::Clamp { .. } => "clamp",
            Op::Relu(..) => "relu",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Frn { .. } => "frn",
            Op::Tlu { .. } => "tlu",
            Op::Standardize { .. } => "standardize",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::FixedChannelAffine { .. } => "fixed_channel_affine",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Per-channel batch statistics produced by [`Tape::standardize`].
#[derive(Clone, Debug)]
pub struct ChannelStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (the one used for normalization).
    pub var: Vec<T>,
    /// Number of values pooled per channel.
    pub count: usize,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(batch, channels, spatial)` view of an NCHW or NC tensor.
fn channel_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(Error::invalid(format!(
            "expected NC or NCHW tensor, got shape {shape:?}"
        ))),
    }
}

fn expect_channels(what: &str, t: &[usize], c: usize) -> Result<()> {
    if t != [c] {
        return Err(Error::invalid(format!(
            "{what} must have shape [{c}], got {t:?}"
        )));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    /// Tapes of the verification width reject non-finite values after every op.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: T::VERIFY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Adjoint of a leaf after the last backward sweep.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NumericFault {
                op: op.name().to_string(),
                detail: format!("non-finite output at tape node {}", self.nodes.len()),
            });
        }
        let needs_grad = requires_grad || self.inputs_need_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            needs_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_need_grad(&self, op: &Op<T>) -> bool {
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatVec(a, b) => ng(a) || ng(b),
            Op::Conv2d { x, w, .. } => ng(x) || ng(w),
            Op::Tlu { x, tau } => ng(x) || ng(tau),
            Op::Frn { x, gamma, beta, .. } => ng(x) || ng(gamma) || ng(beta),
            Op::ChannelAffine { x, scale, shift } => ng(x) || ng(scale) || ng(shift),
            Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Sqrt(x)
            | Op::Relu(x)
            | Op::Reshape(x)
            | Op::Clamp { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::Standardize { x, .. }
            | Op::FixedChannelAffine { x, .. } => ng(x),
        }
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.numel() == 1 {
            let y = vb.data()[0];
            Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x, y)).collect())?
        } else if va.numel() == 1 {
            let x = va.data()[0];
            Tensor::new(vb.shape().to_vec(), vb.data().iter().map(|&y| f(x, y)).collect())?
        } else {
            return Err(Error::invalid(format!(
                "{}: shapes {:?} and {:?} do not match",
                op.name(),
                va.shape(),
                vb.shape()
            )));
        };
        self.push(value, op, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let vx = self.value(x);
        let value = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect())?;
        self.push(value, op, false)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v + c, Op::Shift(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid("clamp: lo > hi"));
        }
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// max(0, x)
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(x), false)
    }

    // ---- reductions and linear algebra ---------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), false)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() == 0 {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let s: T = vx.data().iter().copied().sum();
        let m = s / T::lit(vx.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), false)
    }

    /// `[r, c] · [c] -> [r]`
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (vm, vv) = (self.value(m), self.value(v));
        let (r, c) = match vm.shape() {
            [r, c] if vv.shape() == [*c] => (*r, *c),
            _ => {
                return Err(Error::invalid(format!(
                    "matvec: incompatible shapes {:?} and {:?}",
                    vm.shape(),
                    vv.shape()
                )))
            }
        };
        let data = (0..r)
            .map(|i| {
                vm.data()[i * c..(i + 1) * c]
                    .iter()
                    .zip(vv.data())
                    .map(|(&a, &b)| a * b)
                    .sum()
            })
            .collect();
        self.push(Tensor::new(vec![r], data)?, Op::MatVec(m, v), false)
    }

    // ---- network ops ---------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let data = conv::forward(self.value(x).data(), self.value(w).data(), &geom);
        let value = Tensor::new(geom.out_shape(), data)?;
        self.push(value, Op::Conv2d { x, w, geom }, false)
    }

    /// Row-wise `x / max(‖x‖, eps)` over the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::invalid("l2_normalize: epsilon must be positive"));
        }
        let vx = self.value(x);
        let dim = *vx.shape().last().ok_or_else(|| Error::invalid("l2_normalize of a scalar"))?;
        if dim == 0 {
            return Err(Error::invalid("l2_normalize: empty rows"));
        }
        let mut out = vx.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / dim);
        for row in out.chunks_mut(dim) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let den = n.max(eps);
            row.iter_mut().for_each(|v| *v = *v / den);
            norms.push(n);
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(value, Op::L2Normalize { x, dim, norms, eps }, false)
    }

    /// Filter response normalization: per sample and channel,
    /// `gamma·√n·f/√(‖f‖² + eps) + beta` with `n = H·W`.
    pub fn frn(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if eps < T::zero() {
            return Err(Error::invalid("frn: epsilon must be non-negative"));
        }
        let (n, c, hw) = channel_dims(self.value(x).shape())?;
        expect_channels("frn gamma", self.value(gamma).shape(), c)?;
        expect_channels("frn beta", self.value(beta).shape(), c)?;
        let root_n = T::lit(hw as f64).sqrt();
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); vx.numel()];
        let mut inv = Vec::with_capacity(n * c);
        for g in 0..n * c {
            let ch = g % c;
            let f = &vx.data()[g * hw..(g + 1) * hw];
            let ss: T = f.iter().map(|&v| v * v).sum();
            let den = (ss + eps).sqrt();
            let r = if den > T::zero() { T::one() / den } else { T::zero() };
            let a = vg.data()[ch] * root_n * r;
            let b = vb.data()[ch];
            for (o, &v) in out[g * hw..(g + 1) * hw].iter_mut().zip(f) {
                *o = a * v + b;
            }
            inv.push(r);
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(value, Op::Frn { x, gamma, beta, inv }, false)
    }

    /// Thresholded linear unit `max(x, tau_c)`.
    pub fn tlu(&mut self, x: Var, tau: Var) -> Result<Var> {
        let (_, c, hw) = channel_dims(self.value(x).shape())?;
        expect_channels("tlu tau", self.value(tau).shape(), c)?;
        let (vx, vt) = (self.value(x), self.value(tau));
        let mut out = Vec::with_capacity(vx.numel());
        for (grp, f) in vx.data().chunks(hw.max(1)).enumerate() {
            let t = vt.data()[grp % c];
            out.extend(f.iter().map(|&v| v.max(t)));
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(value, Op::Tlu { x, tau }, false)
    }

    /// Affine-free standardization `(x − μ)/√(σ² + eps)` with biased σ².
    /// Statistics pool over batch and space per channel, or over space per
    /// sample and channel when `per_sample` is set.
    pub fn standardize(&mut self, x: Var, per_sample: bool, eps: T) -> Result<(Var, ChannelStats<T>)> {
        let (n, c, hw) = channel_dims(self.value(x).shape())?;
        let vx = self.value(x);
        let groups = if per_sample { n * c } else { c };
        let count = if per_sample { hw } else { n * hw };
        if count == 0 {
            return Err(Error::invalid("standardize: empty group"));
        }
        let group_of = |span: usize| if per_sample { span } else { span % c };
        let mut mean = vec![T::zero(); groups];
        for (span, f) in vx.data().chunks(hw).enumerate() {
            let s = f.iter().fold(T::zero(), |a, &v| a + v);
            mean[group_of(span)] = mean[group_of(span)] + s;
        }
        let cnt = T::lit(count as f64);
        mean.iter_mut().for_each(|m| *m = *m / cnt);
        let mut var = vec![T::zero(); groups];
        for (span, f) in vx.data().chunks(hw).enumerate() {
            let mu = mean[group_of(span)];
            let s = f.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu));
            var[group_of(span)] = var[group_of(span)] + s;
        }
        var.iter_mut().for_each(|v| *v = *v / cnt);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = Vec::with_capacity(vx.numel());
        for (span, f) in vx.data().chunks(hw).enumerate() {
            let (mu, is) = (mean[group_of(span)], inv_std[group_of(span)]);
            out.extend(f.iter().map(|&v| (v - mu) * is));
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let stats = ChannelStats { mean, var, count };
        let var = self.push(value, Op::Standardize { x, per_sample, inv_std }, false)?;
        Ok((var, stats))
    }

    /// `x·scale_c + shift_c` with learnable per-channel vectors.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (_, c, hw) = channel_dims(self.value(x).shape())?;
        expect_channels("affine scale", self.value(scale).shape(), c)?;
        expect_channels("affine shift", self.value(shift).shape(), c)?;
        let (vx, vs, vb) = (self.value(x), self.value(scale), self.value(shift));
        let mut out = Vec::with_capacity(vx.numel());
        for (span, f) in vx.data().chunks(hw.max(1)).enumerate() {
            let (a, b) = (vs.data()[span % c], vb.data()[span % c]);
            out.extend(f.iter().map(|&v| v * a + b));
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(value, Op::ChannelAffine { x, scale, shift }, false)
    }

    /// `x·scale_c + shift_c` with constant vectors (frozen statistics).
    pub fn fixed_channel_affine(&mut self, x: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let (_, c, hw) = channel_dims(self.value(x).shape())?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::invalid("fixed affine: channel count mismatch"));
        }
        let vx = self.value(x);
        let mut out = Vec::with_capacity(vx.numel());
        for (span, f) in vx.data().chunks(hw.max(1)).enumerate() {
            let (a, b) = (scale[span % c], shift[span % c]);
            out.extend(f.iter().map(|&v| v * a + b));
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(
            value,
            Op::FixedChannelAffine {
                x,
                scale: scale.to_vec(),
            },
            false,
        )
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a one-element node with unit seed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let v = self.value(root);
        if v.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be a scalar, got shape {:?}",
                v.shape()
            )));
        }
        let seed = Tensor::full(v.shape(), T::one());
        self.backward_with(&[(root, seed)])
    }

    /// Reverse sweep seeded with explicit adjoints on any nodes.
    ///
    /// Leaf gradients from a previous sweep are discarded.
    pub fn backward_with(&mut self, seeds: &[(Var, Tensor<T>)]) -> Result<()> {
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, seed) in seeds {
            let node = &self.nodes[v.0];
            if seed.shape() != node.value.shape() {
                return Err(Error::invalid(format!(
                    "seed shape {:?} does not match node shape {:?}",
                    seed.shape(),
                    node.value.shape()
                )));
            }
            accumulate(&self.nodes, &mut adj, *v, seed.data().to_vec());
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if self.check_finite && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericFault {
                    op: node.op.name().to_string(),
                    detail: format!("non-finite adjoint at tape node {i}"),
                });
            }
            propagate(&self.nodes, i, &g, &mut adj)?;
            if node.requires_grad {
                let shape = node.value.shape().to_vec();
                self.nodes[i].grad = Some(Tensor::new(shape, g)?);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], adj: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

/// Sum of `g` when the operand was broadcast from a single element.
fn reduce_to<T: Real>(g: Vec<T>, numel: usize) -> Vec<T> {
    if numel == g.len() {
        g
    } else {
        vec![g.into_iter().sum()]
    }
}

fn bcast<T: Real>(data: &[T], i: usize) -> T {
    if data.len() == 1 {
        data[0]
    } else {
        data[i]
    }
}

fn propagate<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) -> Result<()> {
    let val = |v: &Var| &nodes[v.0].value;
    let ng = |v: &Var| nodes[v.0].needs_grad;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if ng(a) {
                accumulate(nodes, adj, *a, reduce_to(g.to_vec(), val(a).numel()));
            }
            if ng(b) {
                accumulate(nodes, adj, *b, reduce_to(g.to_vec(), val(b).numel()));
            }
        }
        Op::Sub(a, b) => {
            if ng(a) {
                accumulate(nodes, adj, *a, reduce_to(g.to_vec(), val(a).numel()));
            }
            if ng(b) {
                let neg = g.iter().map(|&v| -v).collect();
                accumulate(nodes, adj, *b, reduce_to(neg, val(b).numel()));
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(a).data(), val(b).data());
            if ng(a) {
                let ga = g.iter().enumerate().map(|(k, &gv)| gv * bcast(vb, k)).collect();
                accumulate(nodes, adj, *a, reduce_to(ga, va.len()));
            }
            if ng(b) {
                let gb = g.iter().enumerate().map(|(k, &gv)| gv * bcast(va, k)).collect();
                accumulate(nodes, adj, *b, reduce_to(gb, vb.len()));
            }
        }
        Op::Scale(x, c) => accumulate(nodes, adj, *x, g.iter().map(|&v| v * *c).collect()),
        Op::Shift(x) | Op::Reshape(x) => accumulate(nodes, adj, *x, g.to_vec()),
        Op::MatVec(m, v) => {
            let (vm, vv) = (val(m).data(), val(v).data());
            let c = vv.len();
            if ng(m) {
                let mut gm = vec![T::zero(); vm.len()];
                for (r, &gr) in g.iter().enumerate() {
                    for (k, &x) in vv.iter().enumerate() {
                        gm[r * c + k] = gr * x;
                    }
                }
                accumulate(nodes, adj, *m, gm);
            }
            if ng(v) {
                let mut gv = vec![T::zero(); c];
                for (r, &gr) in g.iter().enumerate() {
                    for k in 0..c {
                        gv[k] = gv[k] + gr * vm[r * c + k];
                    }
                }
                accumulate(nodes, adj, *v, gv);
            }
        }
        Op::Sum(x) => accumulate(nodes, adj, *x, vec![g[0]; val(x).numel()]),
        Op::Mean(x) => {
            let n = val(x).numel();
            accumulate(nodes, adj, *x, vec![g[0] / T::lit(n as f64); n]);
        }
        Op::Sqrt(x) => {
            let two = T::lit(2.0);
            let gx = g.iter().zip(out.data()).map(|(&gv, &y)| gv / (two * y)).collect();
            accumulate(nodes, adj, *x, gx);
        }
        Op::Clamp { x, lo, hi } => {
            let gx = g
                .iter()
                .zip(val(x).data())
                .map(|(&gv, &v)| if v >= *lo && v <= *hi { gv } else { T::zero() })
                .collect();
            accumulate(nodes, adj, *x, gx);
        }
        Op::Relu(x) => {
            let gx = g
                .iter()
                .zip(val(x).data())
                .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                .collect();
            accumulate(nodes, adj, *x, gx);
        }
        Op::Conv2d { x, w, geom } => {
            let (dx, dw) = conv::backward(val(x).data(), val(w).data(), g, geom, ng(x), ng(w));
            if let Some(dx) = dx {
                accumulate(nodes, adj, *x, dx);
            }
            if let Some(dw) = dw {
                accumulate(nodes, adj, *w, dw);
            }
        }
        Op::L2Normalize { x, dim, norms, eps } => {
            let y = out.data();
            let mut gx = vec![T::zero(); y.len()];
            for (r, &n) in norms.iter().enumerate() {
                let rows = r * dim..(r + 1) * dim;
                let (yr, gr) = (&y[rows.clone()], &g[rows.clone()]);
                if n > *eps {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in gx[rows].iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * dot) / n;
                    }
                } else {
                    for (o, &gv) in gx[rows].iter_mut().zip(gr) {
                        *o = gv / *eps;
                    }
                }
            }
            accumulate(nodes, adj, *x, gx);
        }
        Op::Frn { x, gamma, beta, inv } => {
            let (_, c, hw) = channel_dims(out.shape())?;
            let root_n = T::lit(hw as f64).sqrt();
            let vx = val(x).data();
            let vg = val(gamma).data();
            let mut gx = vec![T::zero(); vx.len()];
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for (grp, &r) in inv.iter().enumerate() {
                let ch = grp % c;
                let span = grp * hw..(grp + 1) * hw;
                let (f, gy) = (&vx[span.clone()], &g[span.clone()]);
                let a = vg[ch] * root_n;
                let mut u_dot_du = T::zero();
                for (&fv, &gv) in f.iter().zip(gy) {
                    let u = fv * r;
                    gg[ch] = gg[ch] + gv * root_n * u;
                    gb[ch] = gb[ch] + gv;
                    u_dot_du = u_dot_du + u * gv * a;
                }
                for ((o, &fv), &gv) in gx[span].iter_mut().zip(f).zip(gy) {
                    let u = fv * r;
                    *o = r * (gv * a - u * u_dot_du);
                }
            }
            if ng(x) {
                accumulate(nodes, adj, *x, gx);
            }
            if ng(gamma) {
                accumulate(nodes, adj, *gamma, gg);
            }
            if ng(beta) {
                accumulate(nodes, adj, *beta, gb);
            }
        }
        Op::Tlu { x, tau } => {
            let (_, c, hw) = channel_dims(out.shape())?;
            let (vx, vt) = (val(x).data(), val(tau).data());
            let mut gx = vec![T::zero(); vx.len()];
            let mut gt = vec![T::zero(); c];
            let hw = hw.max(1);
            for (grp, ((f, gy), o)) in vx.chunks(hw).zip(g.chunks(hw)).zip(gx.chunks_mut(hw)).enumerate() {
                let t = vt[grp % c];
                let mut routed = T::zero();
                for ((&v, &gv), o) in f.iter().zip(gy).zip(o) {
                    if v > t {
                        *o = gv;
                    } else {
                        routed = routed + gv;
                    }
                }
                gt[grp % c] = gt[grp % c] + routed;
            }
            if ng(x) {
                accumulate(nodes, adj, *x, gx);
            }
            if ng(tau) {
                accumulate(nodes, adj, *tau, gt);
            }
        }
        Op::Standardize { x, per_sample, inv_std } => {
            let (n, c, hw) = channel_dims(out.shape())?;
            let xhat = out.data();
            let groups = inv_std.len();
            let count = if *per_sample { hw } else { n * hw };
            let group_of = |span: usize| if *per_sample { span } else { span % c };
            let mut sum_g = vec![T::zero(); groups];
            let mut sum_gx = vec![T::zero(); groups];
            for (span, (gy, xs)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                let grp = group_of(span);
                let (mut a, mut b) = (T::zero(), T::zero());
                for (&gv, &xv) in gy.iter().zip(xs) {
                    a = a + gv;
                    b = b + gv * xv;
                }
                sum_g[grp] = sum_g[grp] + a;
                sum_gx[grp] = sum_gx[grp] + b;
            }
            let m = T::lit(count as f64);
            let mut gx = Vec::with_capacity(g.len());
            for (span, (gy, xs)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                let grp = group_of(span);
                let (k, sg, sx) = (inv_std[grp] / m, sum_g[grp], sum_gx[grp]);
                gx.extend(gy.iter().zip(xs).map(|(&gv, &xv)| k * (m * gv - sg - xv * sx)));
            }
            accumulate(nodes, adj, *x, gx);
        }
        Op::ChannelAffine { x, scale, shift } => {
            let (_, c, hw) = channel_dims(out.shape())?;
            let (vx, vs) = (val(x).data(), val(scale).data());
            let mut gx = vec![T::zero(); vx.len()];
            let mut gs = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            let hw = hw.max(1);
            for (span, ((f, gy), o)) in vx.chunks(hw).zip(g.chunks(hw)).zip(gx.chunks_mut(hw)).enumerate() {
                let ch = span % c;
                let (mut a, mut b) = (T::zero(), T::zero());
                for ((&v, &gv), o) in f.iter().zip(gy).zip(o) {
                    *o = gv * vs[ch];
                    a = a + gv * v;
                    b = b + gv;
                }
                gs[ch] = gs[ch] + a;
                gb[ch] = gb[ch] + b;
            }
            if ng(x) {
                accumulate(nodes, adj, *x, gx);
            }
            if ng(scale) {
                accumulate(nodes, adj, *scale, gs);
            }
            if ng(shift) {
                accumulate(nodes, adj, *shift, gb);
            }
        }
        Op::FixedChannelAffine { x, scale } => {
            let (_, c, hw) = channel_dims(out.shape())?;
            let mut gx = Vec::with_capacity(g.len());
            for (span, gy) in g.chunks(hw.max(1)).enumerate() {
                let a = scale[span % c];
                gx.extend(gy.iter().map(|&gv| gv * a));
            }
            accumulate(nodes, adj, *x, gx);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn scalar_kernel_scales_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let w = tape.constant(t(&[1, 1, 1, 1], &[2.0])).unwrap();
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let y = tape.l2_normalize(x, 1e-12).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);

        let z = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.l2_normalize(z, 1e-12).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn frn_example_channel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[3.0, 4.0])).unwrap();
        let g = tape.constant(t(&[1], &[1.0])).unwrap();
        let b = tape.constant(t(&[1], &[0.0])).unwrap();
        let y = tape.frn(x, g, b, 0.0).unwrap();
        let v = tape.value(y).data();
        let r2 = 2f64.sqrt();
        assert!((v[0] - r2 * 0.6).abs() < 1e-12);
        assert!((v[1] - r2 * 0.8).abs() < 1e-12);
        assert!(((v[0] * v[0] + v[1] * v[1]).sqrt() - r2).abs() < 1e-12);

        // zero channel with epsilon: zeros plus beta
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        let b = tape.constant(t(&[1], &[0.25])).unwrap();
        let y = tape.frn(x, g, b, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn tlu_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[-2.0, 0.0, 3.0]).reshape(vec![1, 1, 1, 3]).unwrap()).unwrap();
        let tau = tape.constant(t(&[1], &[-1.0])).unwrap();
        let y = tape.tlu(x, tau).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 0.0, 3.0]);
        let zero = tape.constant(t(&[1], &[0.0])).unwrap();
        let y = tape.tlu(x, zero).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn tlu_routes_adjoint_to_threshold() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 1, 1, 3], &[-2.0, 0.0, 3.0])).unwrap();
        let tau = tape.param(t(&[1], &[-1.0])).unwrap();
        let y = tape.tlu(x, tau).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 1.0]);
        assert_eq!(tape.grad(tau).unwrap().data(), &[1.0]);
    }

    #[test]
    fn shape_mismatch_is_invalid_argument() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[3])).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::InvalidArgument(_))));
        let m = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(tape.matvec(m, b).is_err());
    }

    #[test]
    fn non_finite_is_fault_in_verification_width() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1], &[-1.0])).unwrap();
        assert!(matches!(tape.sqrt(a), Err(Error::NumericFault { .. })));

        // training width does not check
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::vector(vec![-1.0f32])).unwrap();
        assert!(tape.sqrt(a).is_ok());
    }

    #[test]
    fn scalar_broadcast_accumulates() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let s = tape.param(Tensor::scalar(2.0)).unwrap();
        let p = tape.mul(a, s).unwrap();
        let r = tape.sum(p).unwrap();
        tape.backward(r).unwrap();
        assert_eq!(tape.grad(s).unwrap().data(), &[6.0]);
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 2, 3, 3], &(0..18).map(|i| (i as f64).sin()).collect::<Vec<_>>())).unwrap();
        let w = tape.param(t(&[2, 2, 2, 2], &(0..16).map(|i| (i as f64).cos()).collect::<Vec<_>>())).unwrap();
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        let n = tape.l2_normalize(y, 1e-12).unwrap();
        let q = tape.mul(n, n).unwrap();
        let s = tape.sum(q).unwrap();
        tape.backward(s).unwrap();
        let first = (tape.grad(x).unwrap().clone(), tape.grad(w).unwrap().clone());
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &first.0);
        assert_eq!(tape.grad(w).unwrap(), &first.1);
    }
}
