//! Named parameter storage shared by the model, the optimizer and checkpoints.

use std::ops::Index;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor. Names must be unique and whitespace-free.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !name.is_empty() && !name.chars().any(char::is_whitespace),
            "invalid parameter name {name:?}"
        );
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    /// Replaces a tensor's contents, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != tensor.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!(
                    "{}: {:?} vs {:?}",
                    self.names[id.0],
                    slot.shape(),
                    tensor.shape()
                ),
            ));
        }
        *slot = tensor.with_requires_grad(true);
        Ok(())
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Like [`ParamStore::bind`] but without gradient tracking.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound(
            self.tensors
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect(),
        )
    }
}

/// Parameters recorded on a particular tape, indexable by [`ParamId`].
pub struct Bound<'t>(Vec<Var<'t>>);

impl<'t> Bound<'t> {
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.0
    }
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.0[id.0]
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual dense-layer default.
pub fn linear_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_lookup() {
        let mut s = ParamStore::new();
        let a = s.add("a/w", Tensor::zeros(&[2, 3]));
        let b = s.add("b", Tensor::zeros(&[4]));
        assert_eq!(s.find("b"), Some(b));
        assert_eq!(s.name(a), "a/w");
        assert_eq!(s.num_scalars(), 10);
        assert_eq!(s.num_scalars_with_prefix("a/"), 6);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::zeros(&[1]));
        s.add("x", Tensor::zeros(&[1]));
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[2]));
        assert!(s.set(a, Tensor::zeros(&[3])).is_err());
        s.set(a, Tensor::vector(&[1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(s.get(a).data(), &[1.0, 2.0]);
    }
}
