//! Learnable parameters and the store that owns them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Dims, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A learnable tensor with an accumulated-gradient slot of the same dims.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar = f64> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros_like(&value);
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros_like(&self.value);
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Owns every parameter of a model. Modules hold [`ParamId`]s into it.
///
/// Initialization draws from one seeded stream in registration order, so a
/// model built twice with the same seed has identical parameters.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar = f64> {
    params: Vec<Param<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param::new(name, value));
        ParamId(self.params.len() - 1)
    }

    /// He-uniform with bound `sqrt(6 / fan_in)`.
    pub fn he_uniform(&mut self, name: impl Into<String>, dims: Dims, fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let value = Tensor::uniform_with(dims, bound, &mut self.rng);
        self.add(name, value)
    }

    pub fn constant(&mut self, name: impl Into<String>, dims: Dims, value: T) -> ParamId {
        self.add(name, Tensor::full(dims, value))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Param::zero_grad);
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>) {
        self.params[id.0].grad.add_assign(grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_starts_zero_and_matches_dims() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.he_uniform("w", Dims::new(4, 2, 3, 3), 18);
        let p = store.get(id);
        assert_eq!(p.grad.dims(), p.value.dims());
        assert_eq!(p.grad.sum(), 0.0);
        let bound = (6.0f64 / 18.0).sqrt();
        assert!(p.value.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn same_seed_same_init() {
        let build = || {
            let mut s = ParamStore::<f64>::new(11);
            s.he_uniform("a", Dims::new(3, 3, 1, 1), 3);
            s.he_uniform("b", Dims::new(2, 3, 1, 1), 3);
            s
        };
        let (a, b) = (build(), build());
        for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }
}
