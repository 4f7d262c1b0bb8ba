//! Descriptor files.
//!
//! Layout (little-endian): magic `PLDS`, version `u32`, count `u64`, dim
//! `u32`, then `count × dim` `f32` values row-major, then `count` `u32`
//! identity labels.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PLDS";
const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8 + 4;
const NORM_TOL: f64 = 1e-5;

/// Label for descriptors without a known identity.
pub const UNLABELED: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    pub dim: usize,
    /// Unit descriptors, `len × dim` row-major.
    pub unit: Vec<f32>,
    pub labels: Vec<u32>,
    /// Pre-normalization norms, when known. Not stored on disk.
    pub raw_norms: Option<Vec<f32>>,
}

impl DescriptorSet {
    pub fn new(dim: usize, unit: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        if dim == 0 || unit.len() != dim * labels.len() {
            return Err(Error::invalid(format!(
                "{} values for {} descriptors of dimension {dim}",
                unit.len(),
                labels.len()
            )));
        }
        Ok(DescriptorSet {
            dim,
            unit,
            labels,
            raw_norms: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.unit[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> DescriptorSet {
        DescriptorSet {
            dim: self.dim,
            unit: indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            raw_norms: self.raw_norms.as_ref().map(|n| indices.iter().map(|&i| n[i]).collect()),
        }
    }

    /// Index of the first row whose norm is off by more than `tol`.
    pub fn first_non_unit(&self, tol: f64) -> Option<usize> {
        (0..self.len()).find(|&i| {
            let n: f64 = self.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            !((n - 1.0).abs() <= tol)
        })
    }
}

pub fn write_descriptors(path: &Path, set: &DescriptorSet) -> Result<()> {
    if let Some(i) = set.first_non_unit(NORM_TOL) {
        return Err(Error::invalid(format!("descriptor {i} is not unit-norm")));
    }
    let mut out = Vec::with_capacity(HEADER + set.unit.len() * 4 + set.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    out.extend_from_slice(&(set.dim as u32).to_le_bytes());
    for v in &set.unit {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &set.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic, not a descriptor file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let dim = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as u64;
    let expected = count
        .checked_mul(dim)
        .and_then(|v| v.checked_add(count))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(HEADER as u64));
    if dim == 0 || expected != Some(bytes.len() as u64) {
        return Err(Error::format(
            path,
            format!("header declares {count} x {dim} but file has {} bytes", bytes.len()),
        ));
    }
    let (count, dim) = (count as usize, dim as usize);
    let body = &bytes[HEADER..];
    let unit: Vec<f32> = body[..count * dim * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let labels: Vec<u32> = body[count * dim * 4..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let set = DescriptorSet::new(dim, unit, labels)?;
    if let Some(i) = set.first_non_unit(NORM_TOL) {
        return Err(Error::format(path, format!("descriptor {i} is not unit-norm")));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dim: usize) -> DescriptorSet {
        let mut unit = Vec::new();
        for i in 0..5 {
            let v: Vec<f32> = (0..dim).map(|k| ((i * 7 + k * 3) as f32).sin()).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            unit.extend(v.iter().map(|x| x / n));
        }
        DescriptorSet::new(dim, unit, vec![0, 1, 1, 2, UNLABELED]).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for dim in [128, 3] {
            let p = dir.path().join(format!("d{dim}.bin"));
            let s = sample(dim);
            write_descriptors(&p, &s).unwrap();
            let r = read_descriptors(&p).unwrap();
            assert_eq!(r, s);
        }
    }

    #[test]
    fn corrupted_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        write_descriptors(&p, &sample(8)).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_descriptors(&p), Err(Error::Format { .. })));
        bytes[0] = b'P';
        bytes[8] = 99;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_descriptors(&p), Err(Error::Format { .. })));
    }
}
