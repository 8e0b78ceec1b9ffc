use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named parameter tensors of one trainable model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    decay: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Weight decay applies to it when `decay` is set.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        self.decay.push(decay);
        ParamId(self.names.len() - 1)
    }

    /// Truncated-normal (std 0.02) matrix, weight-decayed.
    pub fn weight(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut Rng) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.trunc_normal(0.02)).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data), true)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()), false)
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape.to_vec(), 1.0), false)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrites the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Integrity(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != value.shape() {
            return Err(Error::Integrity(format!(
                "parameter {name}: expected shape {:?}, found {:?}",
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Copies every tensor named `prefix + suffix` in `src` over
    /// `dst_prefix + suffix` here. Returns the number of tensors copied.
    pub fn load_prefixed<'a>(
        &mut self,
        src: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
        prefix: &str,
        dst_prefix: &str,
    ) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in src {
            if let Some(suffix) = name.strip_prefix(prefix) {
                let target = format!("{dst_prefix}{suffix}");
                if self.id(&target).is_some() {
                    self.set(&target, t.clone())?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }
}
