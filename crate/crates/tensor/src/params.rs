use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hasher};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Stable handle to a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named, ordered collection of model parameters.
///
/// Insertion order is the canonical order for checkpoints and optimizer state.
#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub const fn new() -> Self {
        ParamStore { entries: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, value, trainable: true });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    /// Marks every parameter whose name starts with `prefix`. Returns how many matched.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.trainable = trainable;
            n += 1;
        }
        n
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Hash over names, shapes and exact bit patterns of every value whose
    /// name starts with `prefix` (empty prefix covers the whole store).
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h = DefaultHasher::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            h.write(e.name.as_bytes());
            for &d in e.value.shape() {
                h.write_usize(d);
            }
            for v in e.value.data() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    /// Copies values for every parameter of `self` out of `other` by name.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in self.entries.iter_mut() {
            let src = other
                .id(&e.name)
                .map(|id| other.get(id))
                .ok_or_else(|| TensorError::UnknownParam(e.name.clone()))?;
            if src.shape() != e.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_from",
                    lhs: e.value.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            e.value = src.clone();
        }
        Ok(())
    }
}

/// Gradient for every parameter of a store, aligned with its ids.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub(crate) fn new(grads: Vec<Tensor>) -> Self {
        ParamGrads { grads }
    }

    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads { grads: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for g in &mut self.grads {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }

    /// Adds `other` into `self` elementwise.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(s.add("a", Tensor::zeros(&[2])), Err(TensorError::DuplicateParam(_))));
    }

    #[test]
    fn fingerprint_tracks_values_under_prefix() {
        let mut s = ParamStore::new();
        let a = s.add("enc.w", Tensor::ones(&[3])).unwrap();
        s.add("dec.w", Tensor::ones(&[3])).unwrap();
        let enc = s.fingerprint("enc.");
        let dec = s.fingerprint("dec.");
        s.get_mut(a).data_mut()[1] = 2.0;
        assert_ne!(enc, s.fingerprint("enc."));
        assert_eq!(dec, s.fingerprint("dec."));
    }

    #[test]
    fn set_trainable_matches_prefix() {
        let mut s = ParamStore::new();
        s.add("vae.enc.a", Tensor::zeros(&[1])).unwrap();
        s.add("vae.enc.b", Tensor::zeros(&[1])).unwrap();
        let c = s.add("vae.pos.c", Tensor::zeros(&[1])).unwrap();
        assert_eq!(s.set_trainable("vae.enc.", false), 2);
        assert!(s.is_trainable(c));
        assert!(!s.is_trainable(s.id("vae.enc.a").unwrap()));
    }
}
