use indexmap::IndexMap;
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{HcvtError, Result};
use crate::real::Real;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable matrices.
///
/// Names are stable (`branch.adc.cnn.conv1.weight`, ...) and double as
/// checkpoint keys. Insertion order is preserved so that optimizers and
/// checkpoints iterate deterministically.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: IndexMap<String, Array2<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<F>) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(HcvtError::Config(format!("duplicate parameter name `{name}`")));
        }
        let (idx, _) = self.entries.insert_full(name, value);
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| HcvtError::Config(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<F>> {
        self.entries.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        self.entries.get_mut(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<F>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| G::of(x.f64()))))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, value) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in value.iter() {
                h.update(x.f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
