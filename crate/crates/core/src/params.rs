//! Named parameter storage shared between the model, the tape and the optimizer.

use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S: Real> {
    pub name: String,
    pub tensor: Tensor<S>,
}

/// Ordered, named collection of trainable tensors.
///
/// Insertion order is stable and is the order used by checkpoints and by
/// optimizer velocity buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S: Real> {
    params: Vec<Param<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<S>) -> ParamId {
        tensor.set_requires_grad(true);
        self.params.push(Param {
            name: name.into(),
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    /// Matrix initialised uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` with
    /// `fan_in` the leading extent.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        rng: &mut R,
    ) -> ParamId {
        let fan_in = shape[0] as f64;
        let bound = 1.0 / num_traits::Float::sqrt(fan_in);
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::from_f64(dist.sample(rng))).collect();
        self.add(name, Tensor::from_vec(shape, data).expect("shape/data agree"))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, S::from_f64(value)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    /// Total number of scalars over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Adds every parameter gradient recorded on `tape` into the stored
    /// tensors' gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape<S>) {
        for (id, grad) in tape.param_grads() {
            self.params[id.0].tensor.accumulate_grad(grad);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Replaces parameter values by name, checking shapes.
    pub fn load_values<T: Real>(&mut self, name: &str, shape: &[usize], data: &[T]) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Config(alloc::format!("unknown parameter `{name}`")))?;
        let t = &mut self.params[id.0].tensor;
        if t.shape() != shape {
            return Err(Error::shape("load_values", t.shape(), shape));
        }
        for (dst, &src) in t.data_mut().iter_mut().zip(data) {
            *dst = S::from_f64(src.to_f64());
        }
        Ok(())
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }
}
