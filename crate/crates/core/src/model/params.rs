use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::autodiff::{Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Arc<Mat>,
    pub trainable: bool,
}

/// Named tensors in registration order. Values are reference counted so a
/// target network can share frozen weights with its online twin; writes go
/// through copy-on-write.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Mat, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.entries.push(Param {
            name,
            value: Arc::new(value),
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].trainable)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn n_trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Put every parameter on the tape. Trainable ones track gradients when
    /// `grad` is set; frozen ones never do.
    pub fn bind(&self, tape: &mut Tape, grad: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|p| tape.leaf(p.value.clone(), grad && p.trainable))
            .collect()
    }

    pub fn copy_trainables_from(&mut self, other: &ParamStore) {
        assert_eq!(self.entries.len(), other.entries.len());
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.trainable {
                debug_assert_eq!(dst.name, src.name);
                dst.value = src.value.clone();
            }
        }
    }

    fn digest(&self, trainable: bool) -> String {
        let mut h = Sha256::new();
        for p in self.entries.iter().filter(|p| p.trainable == trainable) {
            h.update(p.name.as_bytes());
            for v in p.value.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Bit-level hash of every frozen tensor.
    pub fn frozen_checksum(&self) -> String {
        self.digest(false)
    }

    pub fn trainable_checksum(&self) -> String {
        self.digest(true)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
