//! Named parameter storage shared by the two encoder towers.
//!
//! A [`ParamStore`] owns every weight of one tower as a flat, ordered list of
//! named tensors. Binding a store onto a tape inserts one leaf per parameter,
//! so all forward passes recorded on that tape accumulate gradients into the
//! same leaves. The key tower holds a detached copy whose leaves never track
//! gradients.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numeric::{NumericError, Result, TapeBase, ValueId};
use crate::{Scalar, Tape, Tensor};

/// Index of a parameter inside its store. Stable across detached copies,
/// snapshots and momentum updates, which all preserve order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct Param {
    name: String,
    tensor: Tensor,
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
}

/// Serializable image of one parameter.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamSnapshot {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<Scalar>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.entries.iter().any(|p| p.name == name) {
            return Err(NumericError::Contract(format!(
                "parameter name {name:?} already registered"
            )));
        }
        self.entries.push(Param {
            name: name.to_string(),
            tensor,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Gaussian-initialized trainable matrix.
    pub fn add_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: Scalar,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| {
            NumericError::Contract(format!("bad init std {std}: {e}"))
        })?;
        let values: Vec<Scalar> = (0..numel).map(|_| dist.sample(rng)).collect();
        let tensor = Tensor::new(values, shape.to_vec())?.with_requires_grad(true);
        self.add(name, tensor)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let tensor = Tensor::zeros(shape.to_vec())?.with_requires_grad(true);
        self.add(name, tensor)
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let tensor = Tensor::filled(1.0, shape.to_vec())?.with_requires_grad(true);
        self.add(name, tensor)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Copy with identical names, shapes and values whose tensors never
    /// request gradients. Used for the momentum-averaged tower.
    pub fn detached_copy(&self) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.detached(),
                })
                .collect(),
        }
    }

    /// True when both stores hold the same parameters in the same order with
    /// the same shapes.
    pub fn congruent(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape())
    }

    pub fn snapshot(&self) -> Vec<ParamSnapshot> {
        self.entries
            .iter()
            .map(|p| ParamSnapshot {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.values().to_vec(),
            })
            .collect()
    }

    /// Rebuilds a store from a snapshot; `trainable` selects whether the
    /// restored tensors request gradients.
    pub fn from_snapshot(snaps: &[ParamSnapshot], trainable: bool) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for s in snaps {
            let tensor =
                Tensor::new(s.values.clone(), s.shape.clone())?.with_requires_grad(trainable);
            store.add(&s.name, tensor)?;
        }
        Ok(store)
    }

    /// Binds every parameter as a leaf on `tape`, preserving order.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            ids: self.entries.iter().map(|p| tape.leaf(&p.tensor)).collect(),
        }
    }
}

/// Tape locations of one store's parameters for a single recording.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: Vec<ValueId>,
}

impl Bound {
    pub fn id(&self, pid: ParamId) -> ValueId {
        self.ids[pid.0]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Gradient buffer of one parameter after a backward pass, if tracked.
    pub fn grad_of<'t>(&self, tape: &'t TapeBase<Scalar>, pid: ParamId) -> Option<&'t [Scalar]> {
        tape.grad(self.ids[pid.0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_store(rng: &mut ChaCha8Rng) -> ParamStore {
        let mut s = ParamStore::new();
        s.add_normal("w", &[2, 3], 0.02, rng).unwrap();
        s.add_zeros("b", &[3]).unwrap();
        s.add_ones("gain", &[3]).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add_zeros("w", &[2]).unwrap();
        let err = s.add_zeros("w", &[2]).unwrap_err();
        assert!(err.to_string().contains("already registered"));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = small_store(&mut ChaCha8Rng::seed_from_u64(9));
        let b = small_store(&mut ChaCha8Rng::seed_from_u64(9));
        let c = small_store(&mut ChaCha8Rng::seed_from_u64(10));
        let wa = a.get(ParamId(0)).values();
        assert_eq!(wa, b.get(ParamId(0)).values());
        assert_ne!(wa, c.get(ParamId(0)).values());
    }

    #[test]
    fn detached_copy_is_congruent_and_untracked() {
        let s = small_store(&mut ChaCha8Rng::seed_from_u64(1));
        let d = s.detached_copy();
        assert!(s.congruent(&d));
        for id in d.ids() {
            assert!(!d.get(id).requires_grad());
            assert_eq!(d.get(id).values(), s.get(id).values());
        }
    }

    #[test]
    fn congruence_detects_shape_drift() {
        let a = small_store(&mut ChaCha8Rng::seed_from_u64(1));
        let mut b = ParamStore::new();
        b.add_zeros("w", &[3, 2]).unwrap();
        b.add_zeros("b", &[3]).unwrap();
        b.add_ones("gain", &[3]).unwrap();
        assert!(!a.congruent(&b));
    }

    #[test]
    fn snapshot_roundtrip_is_exact() {
        let s = small_store(&mut ChaCha8Rng::seed_from_u64(4));
        let snaps = s.snapshot();
        let restored = ParamStore::from_snapshot(&snaps, true).unwrap();
        assert!(s.congruent(&restored));
        for id in s.ids() {
            assert_eq!(s.get(id).values(), restored.get(id).values());
            assert!(restored.get(id).requires_grad());
        }
        let frozen = ParamStore::from_snapshot(&snaps, false).unwrap();
        assert!(!frozen.get(ParamId(0)).requires_grad());
    }

    #[test]
    fn bound_trainable_store_receives_grads_but_detached_does_not() {
        let s = small_store(&mut ChaCha8Rng::seed_from_u64(2));
        let k = s.detached_copy();
        let mut tape = Tape::new();
        let bs = s.bind(&mut tape);
        let bk = k.bind(&mut tape);
        let w = bs.id(ParamId(0));
        let wk = bk.id(ParamId(0));
        let joined = tape.mul(w, wk).unwrap();
        let loss = tape.mean_all(joined);
        tape.backward(loss).unwrap();
        assert!(bs.grad_of(&tape, ParamId(0)).is_some());
        assert!(bk.grad_of(&tape, ParamId(0)).is_none());
    }

    #[test]
    fn shared_binding_accumulates_across_uses() {
        // Using one bound leaf twice adds both gradient contributions.
        let mut s = ParamStore::new();
        let w = s.add_ones("w", &[2]).unwrap();
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let first = tape.sum_all(b.id(w));
        let second = tape.sum_all(b.id(w));
        let total = tape.add(first, second).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(b.grad_of(&tape, w).unwrap(), &[2.0, 2.0]);
    }
}
