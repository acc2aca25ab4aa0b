use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernel; counted by the weight penalty.
    Kernel,
    Bias,
    /// Quantizer center vector.
    Centers,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub id: String,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
    pub trainable: bool,
    pub grad: Option<Tensor<T>>,
}

/// Named, ordered collection of parameters. Registration order is stable and
/// defines the checkpoint manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, id: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let id = id.into();
        if self.by_name.contains_key(&id) {
            return Err(Error::InvalidArgument(format!("duplicate parameter id `{id}`")));
        }
        let pid = ParamId(self.params.len());
        self.by_name.insert(id.clone(), pid);
        self.params.push(Parameter { id, tensor, kind, trainable: true, grad: None });
        Ok(pid)
    }

    /// Kernel initialised uniformly in `[-s, s]`, `s = gain * sqrt(3 / fan_in)`,
    /// which gives standard deviation `gain / sqrt(fan_in)`.
    pub fn register_kernel<R: Rng>(
        &mut self,
        id: impl Into<String>,
        shape: &[usize],
        fan_in: f64,
        gain: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let s = gain * (3.0 / fan_in).sqrt();
        self.register(id, Tensor::rand_uniform(shape, -s, s, rng), ParamKind::Kernel)
    }

    pub fn register_bias(&mut self, id: impl Into<String>, len: usize) -> Result<ParamId> {
        self.register(id, Tensor::zeros(&[len]), ParamKind::Bias)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.iter().filter(|(_, p)| p.trainable)
    }

    /// Total number of trainable scalar entries. Each parameter counts once no
    /// matter how many layers use it.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, p)| p.tensor.len()).sum()
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}
