//! Dense n-dimensional `f64` tensors and reverse-mode automatic
//! differentiation.
//!
//! [`Tensor`] is the persistent value type (parameters, buffers). Per-step
//! computation happens on a [`Tape`](tape::Tape): a define-by-run record of
//! primitive operations that is built during the forward pass and replayed in
//! reverse by [`Tape::backward`](tape::Tape::backward). Tapes are rebuilt from
//! scratch every step.

pub mod adam;
pub mod checkpoint;
pub(crate) mod kernels;
pub mod tape;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::rng;

/// Dense row-major `f64` array with optional gradient storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(vec![0.0; shape.iter().product()], shape)
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::from_vec(vec![x], &[1])
    }

    /// Entries drawn i.i.d. uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push((2.0 * rng::uniform(rng) - 1.0) * bound);
        }
        Tensor::from_vec(data, shape)
    }

    /// Entries drawn i.i.d. normal with the given standard deviation.
    pub fn normal(shape: &[usize], std_dev: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(rng::normal(rng) * std_dev);
        }
        Tensor::from_vec(data, shape)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn grad_all_finite(&self) -> bool {
        match &self.grad {
            Some(g) => g.iter().all(|x| x.is_finite()),
            None => true,
        }
    }

    /// Accumulate a gradient contribution (allocating zeroed storage on first use).
    pub fn accumulate_grad(&mut self, contribution: &[f64]) {
        assert_eq!(contribution.len(), self.data.len(), "gradient shape mismatch");
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, ci) in g.iter_mut().zip(contribution) {
            *gi += ci;
        }
    }
}

/// Named parameter collection with deterministic (sorted) iteration order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            self.entries.insert(String::from(name), tensor).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.grad = None;
        }
    }
}
