//! L2-Net-topology descriptor network with FRN + TLU blocks.
//!
//! Layers 1–6 are 3×3 convolutions (strides 1,1,2,1,2,1), each followed by
//! a normalization block and a TLU. Layer 7 is a valid convolution covering
//! the remaining spatial extent, followed by an affine-free batch
//! standardization and L2 normalization. Convolutions carry no bias.

mod checkpoint;

pub use checkpoint::{census, load_checkpoint, save_checkpoint, Census};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ChannelStats, Real, Tape, Tensor, Var};
use crate::data::PatchBatch;
use crate::error::{Error, Result};

pub const FRN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const TAU_INIT: f64 = -1.0;
pub const PATCH_STD_FLOOR: f64 = 1e-6;
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormScheme {
    Frn,
    Bn,
    In,
}

impl NormScheme {
    pub fn name(self) -> &'static str {
        match self {
            NormScheme::Frn => "frn",
            NormScheme::Bn => "bn",
            NormScheme::In => "in",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frn" => Ok(NormScheme::Frn),
            "bn" => Ok(NormScheme::Bn),
            "in" => Ok(NormScheme::In),
            _ => Err(Error::invalid(format!("unknown norm scheme {s:?} (frn, bn, in)"))),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            NormScheme::Frn => 0,
            NormScheme::Bn => 1,
            NormScheme::In => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        [NormScheme::Frn, NormScheme::Bn, NormScheme::In].into_iter().find(|n| n.code() == c)
    }
}

/// Channel multiplier for layers 1–6.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scale {
    Quarter,
    Half,
    Full,
}

impl Scale {
    pub fn divisor(self) -> usize {
        match self {
            Scale::Quarter => 4,
            Scale::Half => 2,
            Scale::Full => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::Quarter => "1/4",
            Scale::Half => "1/2",
            Scale::Full => "1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "1/4" | "0.25" => Ok(Scale::Quarter),
            "1/2" | "0.5" => Ok(Scale::Half),
            "1" | "1.0" => Ok(Scale::Full),
            _ => Err(Error::invalid(format!("scale must be 1/4, 1/2 or 1, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Topology {
    pub input_size: usize,
    /// Output channels of layers 1–6.
    pub channels: [usize; 6],
    pub descriptor_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tlu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub norm: Option<NormScheme>,
    pub activation: Activation,
}

const STRIDES: [usize; 6] = [1, 1, 2, 1, 2, 1];

impl Topology {
    pub fn for_scale(scale: Scale) -> Self {
        let d = scale.divisor();
        Topology {
            input_size: 32,
            channels: [32 / d, 32 / d, 64 / d, 64 / d, 128 / d, 128 / d],
            descriptor_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 4 != 0 {
            return Err(Error::invalid(format!(
                "input size must be a positive multiple of 4, got {}",
                self.input_size
            )));
        }
        if self.channels.contains(&0) || self.descriptor_dim == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }

    pub fn layers(&self, norm: NormScheme) -> Vec<LayerSpec> {
        let mut out = Vec::with_capacity(7);
        let mut cin = 1;
        for (l, &c) in self.channels.iter().enumerate() {
            out.push(LayerSpec {
                in_channels: cin,
                out_channels: c,
                kernel: 3,
                stride: STRIDES[l],
                pad: 1,
                norm: Some(norm),
                activation: Activation::Tlu,
            });
            cin = c;
        }
        out.push(LayerSpec {
            in_channels: cin,
            out_channels: self.descriptor_dim,
            kernel: self.input_size / 4,
            stride: 1,
            pad: 0,
            norm: None,
            activation: Activation::None,
        });
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Learnable parameters and running statistics of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub topology: Topology,
    pub norm: NormScheme,
    pub seed: u64,
    pub params: Vec<NamedTensor<T>>,
    pub buffers: Vec<NamedTensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated by the caller.
    Train,
    /// Running statistics.
    Eval,
}

/// Network outputs recorded on a tape.
pub struct Forward<T> {
    /// `N × dim` descriptors before L2 normalization.
    pub raw: Var,
    /// `N × dim` unit descriptors.
    pub unit: Var,
    /// One leaf per entry of `NetworkParams::params`, same order.
    pub params: Vec<Var>,
    /// Batch statistics keyed by the index of the running-mean buffer.
    pub stats: Vec<(usize, ChannelStats<T>)>,
}

/// Raw and unit descriptors of one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorOut<T> {
    pub raw: Vec<T>,
    pub unit: Vec<T>,
}

fn tensor<T: Real>(shape: &[usize], value: f64) -> Tensor<T> {
    Tensor::full(shape, T::lit(value))
}

pub fn init<T: Real>(seed: u64, scale: Scale, norm: NormScheme) -> NetworkParams<T> {
    init_topology(seed, Topology::for_scale(scale), norm).expect("built-in topology is valid")
}

/// Kaiming-normal convolution weights (std √(2/fan_in)); normalization
/// affine at identity and TLU thresholds at −1.
pub fn init_topology<T: Real>(seed: u64, topology: Topology, norm: NormScheme) -> Result<NetworkParams<T>> {
    topology.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    for (i, spec) in topology.layers(norm).iter().enumerate() {
        let l = i + 1;
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let shape = [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
        let n: usize = shape.iter().product();
        let w: Vec<T> = (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect();
        params.push(NamedTensor {
            name: format!("conv{l}.weight"),
            tensor: Tensor::new(shape.to_vec(), w)?,
        });
        let c = [spec.out_channels];
        if spec.norm.is_some() {
            params.push(NamedTensor {
                name: format!("norm{l}.gamma"),
                tensor: tensor(&c, 1.0),
            });
            params.push(NamedTensor {
                name: format!("norm{l}.beta"),
                tensor: tensor(&c, 0.0),
            });
            if norm == NormScheme::Bn {
                buffers.push(NamedTensor {
                    name: format!("norm{l}.running_mean"),
                    tensor: tensor(&c, 0.0),
                });
                buffers.push(NamedTensor {
                    name: format!("norm{l}.running_var"),
                    tensor: tensor(&c, 1.0),
                });
            }
        }
        if spec.activation == Activation::Tlu {
            params.push(NamedTensor {
                name: format!("tlu{l}.tau"),
                tensor: tensor(&c, TAU_INIT),
            });
        }
    }
    let d = [topology.descriptor_dim];
    buffers.push(NamedTensor {
        name: "final.running_mean".into(),
        tensor: tensor(&d, 0.0),
    });
    buffers.push(NamedTensor {
        name: "final.running_var".into(),
        tensor: tensor(&d, 1.0),
    });
    Ok(NetworkParams {
        topology,
        norm,
        seed,
        params,
        buffers,
    })
}

/// Layer number (1-based) a parameter name belongs to.
pub fn layer_of(name: &str) -> Option<usize> {
    let digits: String = name
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().ok()
}

impl<T: Real> NetworkParams<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    fn index_of(list: &[NamedTensor<T>], name: &str) -> Result<usize> {
        list.iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::invalid(format!("network has no tensor {name}")))
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        let conv = |v: &[NamedTensor<T>]| {
            v.iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect()
        };
        NetworkParams {
            topology: self.topology.clone(),
            norm: self.norm,
            seed: self.seed,
            params: conv(&self.params),
            buffers: conv(&self.buffers),
        }
    }

    /// Blends batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(usize, ChannelStats<T>)]) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (idx, st) in stats {
            let unbias = if st.count > 1 {
                T::lit(st.count as f64 / (st.count - 1) as f64)
            } else {
                T::one()
            };
            let mean = self.buffers[*idx].tensor.data_mut();
            for (r, &b) in mean.iter_mut().zip(&st.mean) {
                *r = keep * *r + m * b;
            }
            let var = self.buffers[*idx + 1].tensor.data_mut();
            for (r, &b) in var.iter_mut().zip(&st.var) {
                *r = keep * *r + m * b * unbias;
            }
        }
    }

    /// Records the network on `tape` for an `N × 1 × S × S` input.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, input: &Tensor<T>, mode: Mode) -> Result<Forward<T>> {
        let s = self.topology.input_size;
        match input.shape() {
            [_, 1, h, w] if *h == s && *w == s => {}
            other => {
                return Err(Error::invalid(format!(
                    "network expects N x 1 x {s} x {s} input, got {other:?}"
                )))
            }
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.param(p.tensor.clone()))
            .collect::<Result<_>>()?;
        let pvar = |name: &str| -> Result<Var> { Ok(params[Self::index_of(&self.params, name)?]) };
        let bn_eps = T::lit(BN_EPS);
        let mut stats = Vec::new();
        let mut x = tape.constant(input.clone())?;
        for (i, spec) in self.topology.layers(self.norm).iter().enumerate() {
            let l = i + 1;
            x = tape.conv2d(x, pvar(&format!("conv{l}.weight"))?, spec.stride, spec.pad)?;
            if let Some(norm) = spec.norm {
                let gamma = pvar(&format!("norm{l}.gamma"))?;
                let beta = pvar(&format!("norm{l}.beta"))?;
                x = match norm {
                    NormScheme::Frn => tape.frn(x, gamma, beta, T::lit(FRN_EPS))?,
                    NormScheme::In => {
                        let (z, _) = tape.standardize(x, true, bn_eps)?;
                        tape.channel_affine(z, gamma, beta)?
                    }
                    NormScheme::Bn => {
                        let rm = Self::index_of(&self.buffers, &format!("norm{l}.running_mean"))?;
                        let z = self.batch_standardize(tape, x, rm, mode, &mut stats)?;
                        tape.channel_affine(z, gamma, beta)?
                    }
                };
            }
            if spec.activation == Activation::Tlu {
                x = tape.tlu(x, pvar(&format!("tlu{l}.tau"))?)?;
            }
        }
        let n = input.shape()[0];
        x = tape.reshape(x, &[n, self.topology.descriptor_dim])?;
        let rm = Self::index_of(&self.buffers, "final.running_mean")?;
        let raw = self.batch_standardize(tape, x, rm, mode, &mut stats)?;
        let unit = tape.l2_normalize(raw, T::norm_eps())?;
        Ok(Forward {
            raw,
            unit,
            params,
            stats,
        })
    }

    fn batch_standardize(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        running_mean: usize,
        mode: Mode,
        stats: &mut Vec<(usize, ChannelStats<T>)>,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (z, st) = tape.standardize(x, false, T::lit(BN_EPS))?;
                stats.push((running_mean, st));
                Ok(z)
            }
            Mode::Eval => {
                let mean = self.buffers[running_mean].tensor.data();
                let var = self.buffers[running_mean + 1].tensor.data();
                let scale: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(BN_EPS)).sqrt()).collect();
                let shift: Vec<T> = mean.iter().zip(&scale).map(|(&m, &s)| -m * s).collect();
                tape.fixed_channel_affine(x, &scale, &shift)
            }
        }
    }

    /// Eval-mode descriptors of the listed patches as flat `n × dim`
    /// matrices `(raw, unit)`.
    pub fn describe(&self, batch: &PatchBatch, indices: &[usize]) -> Result<(Vec<T>, Vec<T>)> {
        let mut raw = Vec::with_capacity(indices.len() * self.topology.descriptor_dim);
        let mut unit = Vec::with_capacity(raw.capacity());
        for chunk in indices.chunks(EVAL_CHUNK) {
            let input = preprocess::<T>(batch, chunk, self.topology.input_size)?;
            let mut tape = Tape::new();
            let f = self.forward_on_tape(&mut tape, &input, Mode::Eval)?;
            raw.extend_from_slice(tape.value(f.raw).data());
            unit.extend_from_slice(tape.value(f.unit).data());
        }
        Ok((raw, unit))
    }

    /// One [`DescriptorOut`] per patch, eval mode.
    pub fn forward(&self, batch: &PatchBatch) -> Result<Vec<DescriptorOut<T>>> {
        let idx: Vec<usize> = (0..batch.len()).collect();
        let (raw, unit) = self.describe(batch, &idx)?;
        let d = self.topology.descriptor_dim;
        Ok(raw
            .chunks(d)
            .zip(unit.chunks(d))
            .map(|(r, u)| DescriptorOut {
                raw: r.to_vec(),
                unit: u.to_vec(),
            })
            .collect())
    }
}

/// Stacks the listed patches into `n × 1 × S × S`, each standardized to
/// zero mean and unit deviation (deviation floored).
pub fn preprocess<T: Real>(batch: &PatchBatch, indices: &[usize], size: usize) -> Result<Tensor<T>> {
    if batch.size != size {
        return Err(Error::invalid(format!(
            "patches are {0}x{0}, network expects {size}x{size}",
            batch.size
        )));
    }
    let npx = size * size;
    let mut data = Vec::with_capacity(indices.len() * npx);
    for &i in indices {
        let p = batch.patch(i);
        let mean = p.iter().map(|&v| v as f64).sum::<f64>() / npx as f64;
        let var = p.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / npx as f64;
        let inv = 1.0 / var.sqrt().max(PATCH_STD_FLOOR);
        data.extend(p.iter().map(|&v| T::lit((v as f64 - mean) * inv)));
    }
    Tensor::new(vec![indices.len(), 1, size, size], data)
}
