use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::ndgrad::Tensor;

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends or replaces `name`, returning its position.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].1 = value;
            return i;
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        self.entries.len() - 1
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.position(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn at(&self, i: usize) -> (&str, &Tensor) {
        let (n, t) = &self.entries[i];
        (n, t)
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Entry count per top-level component (`encoder`, `projector`, ...).
    pub fn numel_by_prefix(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, t) in &self.entries {
            let head = name.split('.').next().unwrap_or(name).to_string();
            match out.iter_mut().find(|(h, _)| *h == head) {
                Some((_, n)) => *n += t.numel(),
                None => out.push((head, t.numel())),
            }
        }
        out
    }

    /// SHA-256 over names, shapes and value bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
