//! Named parameter storage and binding onto a tape.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Optimiser group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Weights,
    Arch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
    pub group: Group,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

/// Tape handles of every parameter, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, group: Group) -> ParamId {
        self.entries.push(Entry { name: name.into(), tensor, group });
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

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.entries[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total scalar count in one group.
    pub fn count(&self, group: Group) -> usize {
        self.entries.iter().filter(|e| e.group == group).map(|e| e.tensor.len()).sum()
    }

    /// Puts every parameter on the tape; groups for which `trainable`
    /// returns true become gradient-tracked leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(Group) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.tensor.clone(), trainable(e.group)))
            .collect();
        Bound { vars }
    }

    /// Hash over the bit patterns of one group, used to verify that an
    /// optimiser step left the other group untouched.
    pub fn checksum(&self, group: Group) -> u64 {
        let mut h = DefaultHasher::new();
        for e in self.entries.iter().filter(|e| e.group == group) {
            e.name.hash(&mut h);
            for v in e.tensor.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Replaces values from another store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| Error::State(format!("parameter `{}` missing", e.name)))?;
            if src.tensor.shape() != e.tensor.shape() {
                return Err(Error::State(format!(
                    "parameter `{}` has shape {}, expected {}",
                    e.name,
                    src.tensor.shape(),
                    e.tensor.shape()
                )));
            }
            e.tensor = src.tensor.clone();
        }
        Ok(())
    }

    /// Copies every parameter whose name and shape match; returns the count.
    pub fn warm_start_from(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if let Some(src) = other.entries.iter().find(|o| o.name == e.name) {
                if src.tensor.shape() == e.tensor.shape() {
                    e.tensor = src.tensor.clone();
                    n += 1;
                }
            }
        }
        n
    }
}

/// 1x1 convolution layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv1 {
    pub w: ParamId,
    pub b: ParamId,
}

/// 3x3 convolution layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv3 {
    pub w: ParamId,
    pub b: ParamId,
}

/// How a layer's weights start out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zero,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Scaled(f64),
}

fn init_tensor<R: Rng + ?Sized>(shape: Shape, fan_in: usize, init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::Scaled(gain) => Tensor::randn(shape, gain / (fan_in.max(1) as f64).sqrt(), rng),
    }
}

impl Conv1 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_tensor(Shape::new(1, c_in, c_out), c_in, init, rng), Group::Weights);
        let b = store.add(format!("{name}.b"), Tensor::zeros(Shape::new(1, 1, c_out)), Group::Weights);
        Conv1 { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv1x1(x, p[self.w], Some(p[self.b]))
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.w).shape().c
    }
}

impl Conv3 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_tensor(Shape::new(9, c_in, c_out), 9 * c_in, init, rng), Group::Weights);
        let b = store.add(format!("{name}.b"), Tensor::zeros(Shape::new(1, 1, c_out)), Group::Weights);
        Conv3 { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv3x3(x, p[self.w], Some(p[self.b]))
    }

    /// `2 N C_in C_out k^2` for `N` output positions.
    pub fn flops(&self, store: &ParamStore, positions: usize) -> f64 {
        let s = store.get(self.w).shape();
        2.0 * positions as f64 * (s.w * s.c * 9) as f64
    }
}
