//! Model checkpoint files.
//!
//! Layout (little-endian): magic `PLNT`, version `u32`, scale divisor `u8`
//! (0 for a custom topology), input size `u32`, six channel counts `u32`,
//! descriptor width `u32`, norm scheme `u8`, value width in bytes `u8`,
//! seed `u64`, tensor count `u32`, then per tensor: name length `u32`,
//! UTF-8 name, rank `u32`, extents `u32 × rank`, values.

use std::fs;
use std::path::Path;

use super::{init_topology, NamedTensor, NetworkParams, NormScheme, Scale, Topology};
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PLNT";
const VERSION: u32 = 1;

/// Expected `(name, shape)` of every tensor, parameters before buffers.
pub type Census = Vec<(String, Vec<usize>)>;

pub fn census(topology: &Topology, norm: NormScheme) -> Result<Census> {
    let p = init_topology::<f32>(0, topology.clone(), norm)?;
    Ok(p.params
        .iter()
        .chain(&p.buffers)
        .map(|t| (t.name.clone(), t.tensor.shape().to_vec()))
        .collect())
}

fn census_diff(expected: &Census, found: &Census) -> Option<String> {
    let mut lines = Vec::new();
    for (name, shape) in expected {
        match found.iter().find(|(n, _)| n == name) {
            None => lines.push(format!("  missing {name} {shape:?}")),
            Some((_, s)) if s != shape => lines.push(format!("  {name}: expected {shape:?}, found {s:?}")),
            _ => {}
        }
    }
    for (name, shape) in found {
        if !expected.iter().any(|(n, _)| n == name) {
            lines.push(format!("  unexpected {name} {shape:?}"));
        }
    }
    (!lines.is_empty()).then(|| lines.join("\n"))
}

fn scale_of(t: &Topology) -> u8 {
    [Scale::Quarter, Scale::Half, Scale::Full]
        .into_iter()
        .find(|s| Topology::for_scale(*s) == *t)
        .map_or(0, |s| s.divisor() as u8)
}

pub fn save_checkpoint<T: Real>(path: &Path, net: &NetworkParams<T>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(scale_of(&net.topology));
    out.extend_from_slice(&(net.topology.input_size as u32).to_le_bytes());
    for c in net.topology.channels {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out.extend_from_slice(&(net.topology.descriptor_dim as u32).to_le_bytes());
    out.push(net.norm.code());
    out.push(T::BYTES as u8);
    out.extend_from_slice(&net.seed.to_le_bytes());
    let all: Vec<&NamedTensor<T>> = net.params.iter().chain(&net.buffers).collect();
    out.extend_from_slice(&(all.len() as u32).to_le_bytes());
    for t in all {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.tensor.shape().len() as u32).to_le_bytes());
        for &d in t.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.tensor.data() {
            v.write_le(&mut out);
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_values<T: Real, S: Real>(r: &mut Reader, n: usize) -> Result<Vec<T>> {
    let raw = r.take(n * S::BYTES)?;
    Ok(raw
        .chunks_exact(S::BYTES)
        .map(|c| T::from_f64(S::read_le(c).f64()).unwrap_or_else(T::nan))
        .collect())
}

/// Loads a checkpoint, converting values to `T`.
///
/// The stored tensors must match the census of the stored topology. When
/// `expected` is given, the stored topology and scheme must also match it;
/// otherwise a census error lists the differences.
pub fn load_checkpoint<T: Real>(path: &Path, expected: Option<(&Topology, NormScheme)>) -> Result<NetworkParams<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let _scale = r.u8()?;
    let input_size = r.u32()? as usize;
    let mut channels = [0usize; 6];
    for c in &mut channels {
        *c = r.u32()? as usize;
    }
    let descriptor_dim = r.u32()? as usize;
    let topology = Topology {
        input_size,
        channels,
        descriptor_dim,
    };
    topology
        .validate()
        .map_err(|e| Error::format(path, format!("bad topology: {e}")))?;
    let norm = NormScheme::from_code(r.u8()?).ok_or_else(|| Error::format(path, "unknown norm scheme"))?;
    let width = r.u8()?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data = match width {
            4 => read_values::<T, f32>(&mut r, n)?,
            8 => read_values::<T, f64>(&mut r, n)?,
            w => return Err(Error::format(path, format!("unsupported value width {w}"))),
        };
        tensors.push(NamedTensor {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    if r.at != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.at)));
    }

    let found: Census = tensors.iter().map(|t| (t.name.clone(), t.tensor.shape().to_vec())).collect();
    if let Some((topo, scheme)) = expected {
        if let Some(diff) = census_diff(&census(topo, scheme)?, &found) {
            return Err(Error::Census(format!(
                "checkpoint {} ({} norm) does not match the requested network ({} norm):\n{diff}",
                path.display(),
                norm.name(),
                scheme.name()
            )));
        }
    }
    let own = census(&topology, norm)?;
    if let Some(diff) = census_diff(&own, &found) {
        return Err(Error::Census(format!(
            "checkpoint {} is inconsistent with its header:\n{diff}",
            path.display()
        )));
    }
    // reorder into canonical order
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    let nparams = init_topology::<f32>(0, topology.clone(), norm)?.params.len();
    for (i, (name, _)) in own.iter().enumerate() {
        let t = tensors
            .iter()
            .find(|t| &t.name == name)
            .expect("census checked")
            .clone();
        if i < nparams {
            params.push(t);
        } else {
            buffers.push(t);
        }
    }
    Ok(NetworkParams {
        topology,
        norm,
        seed,
        params,
        buffers,
    })
}
