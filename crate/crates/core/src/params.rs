//! Named parameter inventories and checkpoint directories.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::snapshot;
use crate::tensor::Tensor;

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// True when both sets hold the same names with the same shapes, in order.
    pub fn same_inventory(&self, other: &ParamSet) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes one snapshot file per parameter into `dir`, named
    /// `<prefix><name>.bin`.
    pub fn save_dir(&self, dir: &Path, prefix: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, t) in self.iter() {
            snapshot::save(&dir.join(format!("{prefix}{name}.bin")), t)?;
        }
        Ok(())
    }

    /// Loads every name in `names` from `dir`.
    pub fn load_dir(dir: &Path, prefix: &str, names: &[String]) -> Result<Self> {
        let mut set = Self::new();
        for name in names {
            let path = dir.join(format!("{prefix}{name}.bin"));
            if !path.exists() {
                return Err(Error::Format(format!("missing parameter file {}", path.display())));
            }
            set.insert(name.clone(), snapshot::load(&path)?);
        }
        Ok(set)
    }
}
