use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::numerics::Matrix;

/// One registered tensor with its gradient and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub tensor: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
}

impl ParamEntry {
    fn new(tensor: Matrix) -> Self {
        let (r, c) = tensor.shape();
        ParamEntry {
            tensor,
            grad: Matrix::zeros(r, c),
            trainable: true,
            adam_m: Matrix::zeros(r, c),
            adam_v: Matrix::zeros(r, c),
        }
    }
}

/// Name-keyed parameter registry, iterated in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    /// Registers every tensor of `w`; all start trainable.
    pub fn from_weights(w: &ModelWeights) -> Self {
        let mut entries = BTreeMap::new();
        w.visit(&mut |name, (r, c), values| {
            let m = Matrix::from_vec(r, c, values.to_vec()).expect("visitor shape matches data");
            entries.insert(name.to_string(), ParamEntry::new(m));
        });
        ParamStore { entries }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_trainable(&mut self, mut rule: impl FnMut(&str) -> bool) {
        for (name, e) in &mut self.entries {
            e.trainable = rule(name);
        }
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Adds `scale · grads` into the gradient buffers of trainable entries.
    pub fn accumulate_grads(&mut self, grads: &ModelWeights, scale: f64) {
        grads.visit(&mut |name, _, values| {
            if let Some(e) = self.entries.get_mut(name) {
                if e.trainable {
                    for (g, v) in e.grad.data_mut().iter_mut().zip(values) {
                        *g += scale * v;
                    }
                }
            }
        });
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(0.0);
        }
    }

    /// Copies every registered tensor into `w`.
    pub fn write_to(&self, w: &mut ModelWeights) -> Result<()> {
        let mut missing = None;
        w.visit_mut(&mut |name, shape, values| match self.entries.get(name) {
            Some(e) if e.tensor.shape() == shape => values.copy_from_slice(e.tensor.data()),
            _ => {
                missing.get_or_insert_with(|| name.to_string());
            }
        });
        match missing {
            Some(name) => Err(Error::MissingParam(name)),
            None => Ok(()),
        }
    }

    /// Copies only trainable tensors into `w`; frozen ones are never touched.
    pub(crate) fn write_trainable_to(&self, w: &mut ModelWeights) {
        w.visit_mut(&mut |name, _, values| {
            if let Some(e) = self.entries.get(name) {
                if e.trainable {
                    values.copy_from_slice(e.tensor.data());
                }
            }
        });
    }

    /// FNV-1a over the bit patterns of the selected tensors, in name order.
    pub fn checksum(&self, mut select: impl FnMut(&str) -> bool) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (name, e) in &self.entries {
            if select(name) {
                h = fnv(h, name.as_bytes());
                for v in e.tensor.data() {
                    h = fnv(h, &v.to_bits().to_le_bytes());
                }
            }
        }
        h
    }
}

fn fnv(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Checksum of the selected tensors of a weight set, as in [`ParamStore::checksum`].
pub fn weights_checksum(w: &ModelWeights, select: impl FnMut(&str) -> bool) -> u64 {
    ParamStore::from_weights(w).checksum(select)
}
