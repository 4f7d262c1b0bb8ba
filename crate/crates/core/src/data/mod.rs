//! Patch datasets, the synthetic generator, the UBC-style container and
//! descriptor files.

mod descriptors;
mod synth;
mod ubc;

pub use descriptors::{read_descriptors, write_descriptors, DescriptorSet, UNLABELED};
pub use synth::{synth_generate, synth_generate_with, Jitter, SynthConfig};
pub use ubc::{read_ubc, write_ubc, UBC_PATCH, UBC_TILES};

use crate::error::{Error, Result};

/// Grayscale patches in `[0, 1]`, row-major `N × S × S`, with a 3D-point
/// identity per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub size: usize,
    pub patches: Vec<f32>,
    pub identity: Vec<u32>,
    pub source: String,
}

impl PatchBatch {
    pub fn new(size: usize, patches: Vec<f32>, identity: Vec<u32>, source: impl Into<String>) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("patch size must be positive"));
        }
        if patches.len() != identity.len() * size * size {
            return Err(Error::invalid(format!(
                "{} pixel values for {} patches of {size}x{size}",
                patches.len(),
                identity.len()
            )));
        }
        Ok(PatchBatch {
            size,
            patches,
            identity,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.identity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identity.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.patches[i * n..(i + 1) * n]
    }

    /// Copies the listed patches, in order.
    pub fn subset(&self, indices: &[usize]) -> PatchBatch {
        let mut patches = Vec::with_capacity(indices.len() * self.size * self.size);
        for &i in indices {
            patches.extend_from_slice(self.patch(i));
        }
        PatchBatch {
            size: self.size,
            patches,
            identity: indices.iter().map(|&i| self.identity[i]).collect(),
            source: self.source.clone(),
        }
    }

    /// Patch indices grouped by identity, identities ascending.
    pub fn groups(&self) -> Vec<(u32, Vec<usize>)> {
        let mut map = std::collections::BTreeMap::<u32, Vec<usize>>::new();
        for (i, &id) in self.identity.iter().enumerate() {
            map.entry(id).or_default().push(i);
        }
        map.into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_is_checked() {
        assert!(PatchBatch::new(2, vec![0.0; 8], vec![0, 1], "t").is_ok());
        assert!(PatchBatch::new(2, vec![0.0; 7], vec![0, 1], "t").is_err());
    }

    #[test]
    fn groups_and_subset() {
        let b = PatchBatch::new(1, vec![0.1, 0.2, 0.3, 0.4], vec![5, 2, 5, 2], "t").unwrap();
        assert_eq!(b.groups(), vec![(2, vec![1, 3]), (5, vec![0, 2])]);
        let s = b.subset(&[3, 0]);
        assert_eq!(s.patches, vec![0.4, 0.1]);
        assert_eq!(s.identity, vec![2, 5]);
    }
}
