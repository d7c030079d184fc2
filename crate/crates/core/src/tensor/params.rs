use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers (e.g. batch-norm running statistics) are stored alongside the
    /// weights but never receive gradients.
    pub trainable: bool,
}

/// Ordered, named parameter collection of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn param(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i].value)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Hash over names and exact value bits, used to assert that a parameter
    /// set was left untouched.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            h.write(p.name.as_bytes());
            for v in p.value.data() {
                h.write_u32(v.to_bits());
            }
        }
        h.finish()
    }

    /// Registers every entry on the tape; trainable entries become
    /// differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        self.bind_inner(tape, true)
    }

    /// Registers every entry as a constant, so no gradient reaches it.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bindings {
        self.bind_inner(tape, false)
    }

    fn bind_inner(&self, tape: &mut Tape, trainable: bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable && p.trainable))
            .collect();
        Bindings { vars }
    }

    /// Overwrites values from `(name, tensor)` pairs; every entry must be
    /// present with a matching shape.
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Tape handles for one [`ParamSet`], indexed like the set.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients populated by [`Tape::backward`], one slot per parameter.
    pub fn gradients(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| tape.gradient(v).cloned()).collect()
    }
}
