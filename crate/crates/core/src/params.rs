use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named network parameters in insertion order.
///
/// Each tensor's `requires_grad` flag doubles as its trainable flag. Names are
/// dotted paths (`seg.head.w`); a *group* is any dotted prefix (`seg.head`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry {
    entries: IndexMap<String, Tensor>,
}

/// Gradients keyed by parameter name.
pub type Grads = IndexMap<String, Tensor>;

fn in_group(name: &str, group: &str) -> bool {
    name.strip_prefix(group)
        .is_some_and(|rest| rest.is_empty() || rest.starts_with('.'))
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Parameter {
                name,
                reason: "duplicate name".into(),
            });
        }
        self.entries
            .insert(name, tensor.with_requires_grad(trainable));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|t| t.requires_grad)
            .map(Tensor::numel)
            .sum()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|t| t.requires_grad)
    }

    pub fn has_group(&self, group: &str) -> bool {
        self.entries.keys().any(|n| in_group(n, group))
    }

    pub fn set_group_trainable(&mut self, group: &str, trainable: bool) -> Result<()> {
        if !self.has_group(group) {
            return Err(Error::MissingGroup(group.to_string()));
        }
        for (name, t) in &mut self.entries {
            if in_group(name, group) {
                t.requires_grad = trainable;
            }
        }
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for t in self.entries.values_mut() {
            t.requires_grad = trainable;
        }
    }

    /// Freezes everything except `group`, which becomes trainable.
    pub fn freeze_all_but(&mut self, group: &str) -> Result<()> {
        if !self.has_group(group) {
            return Err(Error::MissingGroup(group.to_string()));
        }
        for (name, t) in &mut self.entries {
            t.requires_grad = in_group(name, group);
        }
        Ok(())
    }

    /// Records every parameter on `tape` as a leaf; trainable ones require
    /// gradients.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_inner(tape, None)
    }

    /// Like [`bind`](Self::bind) but overrides the gradient flag for all
    /// parameters.
    pub fn bind_with_grad(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        self.bind_inner(tape, Some(requires_grad))
    }

    fn bind_inner(&self, tape: &mut Tape, force: Option<bool>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| {
                let rg = force.unwrap_or(t.requires_grad);
                let mut leaf = Tensor::new(t.shape().to_vec(), t.data().to_vec())
                    .expect("registry tensors are well-formed");
                leaf.requires_grad = rg;
                (name.clone(), tape.leaf(leaf))
            })
            .collect();
        Bound { vars }
    }

    /// Overwrites values from `other`, which must hold identically named and
    /// shaped tensors. Trainable flags are kept.
    pub fn load_values(&mut self, other: &ParamRegistry) -> Result<()> {
        for (name, t) in &mut self.entries {
            let src = other.get(name).ok_or_else(|| Error::Parameter {
                name: name.clone(),
                reason: "missing from checkpoint".into(),
            })?;
            if src.shape() != t.shape() {
                return Err(Error::Parameter {
                    name: name.clone(),
                    reason: format!(
                        "checkpoint shape {:?} does not match {:?}",
                        src.shape(),
                        t.shape()
                    ),
                });
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Appends all entries of `other`, keeping its trainable flags.
    pub fn extend(&mut self, other: &ParamRegistry) -> Result<()> {
        for (name, t) in other.iter() {
            self.insert(name, t.clone(), t.requires_grad)?;
        }
        Ok(())
    }

    /// Entries whose names fall under `group`.
    pub fn subset(&self, group: &str) -> ParamRegistry {
        ParamRegistry {
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| in_group(n, group))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    /// Fingerprint of all names and values.
    pub fn checksum(&self) -> u64 {
        self.entries.iter().fold(0u64, |acc, (name, t)| {
            let name_hash = name
                .bytes()
                .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
                    (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
                });
            acc.rotate_left(7) ^ name_hash ^ t.checksum()
        })
    }
}

/// Tape handles for a bound [`ParamRegistry`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Parameter {
            name: name.to_string(),
            reason: "not present in the bound registry".into(),
        })
    }

    /// Gradients of every parameter that received one in the last backward.
    pub fn grads(&self, tape: &Tape) -> Grads {
        self.vars
            .iter()
            .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g)))
            .collect()
    }
}
