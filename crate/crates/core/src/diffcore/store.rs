use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Param {
    value: Tensor,
    grad: Option<Tensor>,
}

/// Named parameters in lexicographic order, with optional gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
    steps: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Validation(format!("duplicate parameter {name}")));
        }
        self.params
            .insert(name.to_string(), Param { value, grad: None });
        Ok(())
    }

    /// Inserts or overwrites a value, dropping any pending gradient.
    pub fn set(&mut self, name: &str, value: Tensor) {
        self.params
            .insert(name.to_string(), Param { value, grad: None });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))?;
        if p.value.shape() != grad.shape() {
            return Err(Error::dim("accumulate_grad", p.value.shape(), grad.shape()));
        }
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub(crate) fn bump_steps(&mut self) {
        self.steps += 1;
    }

    pub fn set_steps(&mut self, steps: u64) {
        self.steps = steps;
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParameterStore, prefix: &str) {
        for (name, value) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.set(name, value.clone());
        }
    }
}

/// A tape plus lazy binding of store parameters as leaves.
///
/// A parameter is bound the first time it is requested and requires a
/// gradient iff the trainable predicate accepts its name.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParameterStore,
    bound: BTreeMap<String, Var>,
    trainable: Box<dyn Fn(&str) -> bool + 's>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParameterStore, trainable: impl Fn(&str) -> bool + 's) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            trainable: Box::new(trainable),
        }
    }

    /// A session where nothing requires gradients.
    pub fn inference(store: &'s ParameterStore) -> Self {
        Self::new(store, |_| false)
    }

    pub fn store(&self) -> &ParameterStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .store
            .get(name)
            .ok_or_else(|| Error::Usage(format!("parameter {name} is not in the store")))?
            .clone();
        let v = self.tape.leaf(value, (self.trainable)(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn gradients(&self) -> Vec<(String, Tensor)> {
        self.bound
            .iter()
            .filter_map(|(n, &v)| self.tape.grad(v).map(|g| (n.clone(), g)))
            .collect()
    }
}
