//! Named parameter and buffer storage shared by every network module.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Insertion-ordered store of parameters (with gradients) and non-trainable
/// buffers such as batch-norm running statistics.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
            buffer_index: HashMap::new(),
        }
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) || self.buffer_index.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            trainable: true,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufferId> {
        if self.index.contains_key(name) || self.buffer_index.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        self.buffer_index
            .insert(name.to_string(), self.buffers.len());
        self.buffers.push((name.to_string(), value));
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].1
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        self.buffer_index.get(name).map(|&i| BufferId(i))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Sets `trainable` on every parameter whose name starts with `prefix`;
    /// returns how many matched.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Global L2 norm over the gradients of trainable parameters.
    pub fn grad_norm(&self) -> T {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.grad.sum_squares())
            .sum::<T>()
            .sqrt()
    }

    /// Copies values (and buffers) from `other` for every name present in both.
    pub fn copy_matching_from(&mut self, other: &ParamStore<T>) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(q) = other.id(&p.name) {
                let src = &other.param(q).value;
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    n += 1;
                }
            }
        }
        for (name, t) in &mut self.buffers {
            if let Some(b) = other.buffer_id(name) {
                let src = other.buffer(b);
                if src.shape() == t.shape() {
                    *t = src.clone();
                }
            }
        }
        n
    }
}
