use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Replay, Tape, Var};
use crate::tensor::Tensor;

/// A trainable tensor and its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), Param { value, grad: None });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn value_at(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].value
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].value
    }

    /// Adds `grads` into each parameter's accumulator.
    pub fn accumulate(&mut self, grads: &ParamGrads<T>) -> Result<()> {
        if grads.grads.len() != self.entries.len() {
            return Err(TensorError::Invalid(format!(
                "{} gradients for {} parameters",
                grads.grads.len(),
                self.entries.len()
            )));
        }
        for (p, g) in self.entries.values_mut().zip(&grads.grads) {
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                slot => *slot = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.as_ref().map(Tensor::cast),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Keeps only the parameters whose names satisfy `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.entries.retain(|k, _| keep(k));
    }
}

/// One gradient per parameter, aligned with the owning [`ParamSet`]'s order.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            grads: params.entries.values().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.grads[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.grads.iter()
    }

    pub fn add(&mut self, other: &Self) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = T::cast(v.widen() * s));
        }
    }
}

/// A tape bound to a parameter set: parameters are recorded lazily as
/// gradient-tracked leaves on first use.
pub struct Session<'p, T> {
    tape: Tape<T>,
    params: &'p ParamSet<T>,
    bound: Vec<Option<Var>>,
    perturbed: Option<usize>,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self::with_tape(params, Tape::new())
    }

    pub fn with_tape(params: &'p ParamSet<T>, tape: Tape<T>) -> Self {
        Self {
            tape,
            params,
            bound: vec![None; params.len()],
            perturbed: None,
        }
    }

    /// Re-evaluation after changing only the parameter at index `perturbed`;
    /// everything not downstream of it is copied from `replay`.
    pub fn replaying(params: &'p ParamSet<T>, replay: Arc<Replay<T>>, perturbed: usize) -> Self {
        Self {
            perturbed: Some(perturbed),
            ..Self::with_tape(params, Tape::replaying(replay))
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self
            .params
            .index_of(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let dirty = self.perturbed.map_or(true, |p| p == i);
        let v = self.tape.leaf_marked(self.params.value_at(i).clone(), dirty)?;
        self.bound[i] = Some(v);
        Ok(v)
    }

    /// Gradients for every parameter; parameters the graph never touched
    /// get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<ParamGrads<T>> {
        let mut g = self.tape.backward(loss)?;
        let grads = self
            .bound
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.and_then(|v| g.take(v))
                    .unwrap_or_else(|| Tensor::zeros(self.params.value_at(i).shape()))
            })
            .collect();
        Ok(ParamGrads { grads })
    }
}

impl<T> Deref for Session<'_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T> DerefMut for Session<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}
