//! Named parameter storage shared by the backbone and the heads.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

use crate::error::Result;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Which part of the network a parameter belongs to. Freeze policies are
/// expressed over groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    PatchEmbed,
    Position,
    ClassToken,
    Prompt,
    Encoder,
    LoraFactor,
    ClassHead,
    DomainHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::PatchEmbed,
        ParamGroup::Position,
        ParamGroup::ClassToken,
        ParamGroup::Prompt,
        ParamGroup::Encoder,
        ParamGroup::LoraFactor,
        ParamGroup::ClassHead,
        ParamGroup::DomainHead,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Tape leaves for every parameter of a store, in declaration order.
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    pub fn from_vars(vars: &[Var]) -> Self {
        Bindings(vars.to_vec())
    }
}

impl Index<ParamId> for Bindings {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Sets `requires_grad` on every parameter according to its group.
    pub fn set_trainable(&mut self, trainable: impl Fn(ParamGroup) -> bool) {
        for e in &mut self.entries {
            e.tensor.set_requires_grad(trainable(e.group));
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings(self.entries.iter().map(|e| tape.leaf(&e.tensor)).collect())
    }

    /// Adds the gradients of a backward sweep into the tracked parameters.
    pub fn absorb(&mut self, bindings: &Bindings, grads: &Gradients) -> Result<()> {
        for (e, v) in self.entries.iter_mut().zip(&bindings.0) {
            if let Some(g) = grads.get(*v) {
                e.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.tensor.requires_grad()).map(|e| e.tensor.len()).sum()
    }

    /// FNV-1a over names, shapes and value bits of the selected parameters.
    pub fn checksum(&self, select: impl Fn(&ParamEntry) -> bool) -> u64 {
        let mut h = Fnv::new();
        for e in self.entries.iter().filter(|e| select(e)) {
            h.write(e.name.as_bytes());
            for d in e.tensor.shape() {
                h.write(&(*d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Checksum of every parameter that is currently frozen.
    pub fn frozen_checksum(&self) -> u64 {
        self.checksum(|e| !e.tensor.requires_grad())
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
