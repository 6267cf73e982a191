use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    first_moment: Tensor<T>,
    second_moment: Tensor<T>,
}

/// Non-trainable state saved with the model (batch-norm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Named trainable parameters, their gradients and Adam state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    by_name: BTreeMap<String, usize>,
    buffer_by_name: BTreeMap<String, usize>,
    step: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            by_name: BTreeMap::new(),
            buffer_by_name: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) || self.buffer_by_name.contains_key(name) {
            return Err(Error::validation("parameter name", format!("duplicate name {name}")));
        }
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(&shape),
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
        });
        self.by_name.insert(name.to_string(), self.params.len() - 1);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufferId> {
        if self.by_name.contains_key(name) || self.buffer_by_name.contains_key(name) {
            return Err(Error::validation("buffer name", format!("duplicate name {name}")));
        }
        self.buffers.push(Buffer { name: name.to_string(), value });
        self.buffer_by_name.insert(name.to_string(), self.buffers.len() - 1);
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        self.buffer_by_name.get(name).map(|&i| BufferId(i))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (BufferId, &Buffer<T>)> {
        self.buffers.iter().enumerate().map(|(i, b)| (BufferId(i), b))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) {
        for (g, d) in self.params[id.0].grad.data_mut().iter_mut().zip(grad.data()) {
            *g += *d;
        }
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn adam_step(&mut self, lr: f64, cfg: AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let correct1 = T::of(1.0 - cfg.beta1.powi(t));
        let correct2 = T::of(1.0 - cfg.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(cfg.eps));
        for p in &mut self.params {
            let Param { value, grad, first_moment, second_moment, .. } = p;
            let iter = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(first_moment.data_mut().iter_mut().zip(second_moment.data_mut().iter_mut()));
            for ((w, &g), (m, v)) in iter {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / correct1;
                let v_hat = *v / correct2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Converts every tensor to another element type, dropping optimizer state.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(&p.name, p.value.cast()).expect("names are unique");
        }
        for b in &self.buffers {
            out.add_buffer(&b.name, b.value.cast()).expect("names are unique");
        }
        out.step = self.step;
        out
    }
}
