use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a registered parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named learnable tensors.
///
/// Registration order is the checkpoint order and the initialization order,
/// so a fixed seed always produces the same weights.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, mut value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        value.requires_grad = true;
        value.grad = None;
        let id = self.tensors.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(id))
    }

    /// Registers a parameter initialized uniformly in `±1/sqrt(fan_in)`.
    pub fn register_fan_in<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.register(name, Tensor::uniform(shape, -bound, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Adds `grad` into the parameter's accumulated gradient.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        let t = &mut self.tensors[id.0];
        debug_assert_eq!(t.len(), grad.len());
        match &mut t.grad {
            Some(acc) => {
                for (a, &g) in acc.iter_mut().zip(grad) {
                    *a += g;
                }
            }
            None => t.grad = Some(grad.to_vec()),
        }
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        let mut value = value;
        value.requires_grad = true;
        value.grad = None;
        *slot = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.register(name, t.cast()).expect("names are unique");
        }
        out
    }
}
