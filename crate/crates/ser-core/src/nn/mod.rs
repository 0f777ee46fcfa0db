//! Trainable parameters, buffers, and the layer zoo.

mod layers;

pub use layers::{BatchNorm2d, BiLstm, Conv2d, GroupNorm, Linear};

use std::sync::Mutex;

use rand::Rng;

use crate::error::{Result, SerError};
use crate::tensor::{Element, Tensor};

/// A named trainable tensor. The value is a leaf with gradient tracking;
/// optimizers may replace it wholesale via [`Parameter::set_data`].
pub struct Parameter<T: Element> {
    name: String,
    value: Mutex<Tensor<T>>,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let tensor = Tensor::leaf(data, shape, true)?;
        Ok(Parameter {
            name: name.into(),
            value: Mutex::new(tensor),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Handle to the current value; cheap (Arc clone).
    pub fn tensor(&self) -> Tensor<T> {
        self.value.lock().expect("param lock").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tensor().numel()
    }

    pub fn data(&self) -> Vec<T> {
        self.tensor().data().to_vec()
    }

    pub fn grad_or_zeros(&self) -> Vec<T> {
        self.tensor().grad_or_zeros()
    }

    pub fn zero_grad(&self) {
        self.tensor().zero_grad();
    }

    /// Replace the value with a fresh leaf (clears the gradient).
    pub fn set_data(&self, data: Vec<T>) {
        let shape = self.shape();
        let t = Tensor::leaf(data, &shape, true).expect("shape preserved");
        *self.value.lock().expect("param lock") = t;
    }
}

/// A named non-trainable state vector (e.g. batch-norm running statistics).
pub struct Buffer<T: Element> {
    name: String,
    value: Mutex<Vec<T>>,
}

impl<T: Element> Buffer<T> {
    pub fn new(name: impl Into<String>, value: Vec<T>) -> Self {
        Buffer {
            name: name.into(),
            value: Mutex::new(value),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn get(&self) -> Vec<T> {
        self.value.lock().expect("buffer lock").clone()
    }

    pub fn set(&self, value: Vec<T>) {
        let mut slot = self.value.lock().expect("buffer lock");
        assert_eq!(slot.len(), value.len(), "buffer length is fixed");
        *slot = value;
    }

    pub fn update(&self, f: impl FnOnce(&mut Vec<T>)) {
        f(&mut self.value.lock().expect("buffer lock"));
    }
}

/// Anything that owns parameters (and possibly buffers).
pub trait ParamModule<T: Element> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>);
    fn collect_buffers<'a>(&'a self, _out: &mut Vec<&'a Buffer<T>>) {}
}

/// Gather a module's parameters in registration order, verifying name
/// uniqueness.
pub fn registry<T: Element>(module: &dyn ParamModule<T>) -> Result<Vec<&Parameter<T>>> {
    let mut params = Vec::new();
    module.collect_params(&mut params);
    let mut seen = std::collections::HashSet::new();
    for p in &params {
        if !seen.insert(p.name()) {
            return Err(SerError::Config(format!(
                "duplicate parameter name `{}` in registry",
                p.name()
            )));
        }
    }
    Ok(params)
}

/// Kaiming-uniform fan-in initialization (relu gain).
pub fn kaiming_uniform<T: Element, R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    uniform_pm(rng, n, bound)
}

/// Samples from U(-bound, bound).
pub fn uniform_pm<T: Element, R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<T> {
    let lo = T::from_f64(-bound);
    let hi = T::from_f64(bound);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_set_data_clears_grad() {
        let p = Parameter::<f64>::new("w", vec![1.0, 2.0], &[2]).unwrap();
        let t = p.tensor();
        let loss = crate::tensor::sum_all(&t);
        loss.backward().unwrap();
        assert_eq!(p.grad_or_zeros(), vec![1.0, 1.0]);
        p.set_data(vec![3.0, 4.0]);
        assert_eq!(p.grad_or_zeros(), vec![0.0, 0.0]);
        assert_eq!(p.data(), vec![3.0, 4.0]);
    }

    #[test]
    fn registry_rejects_duplicate_names() {
        struct Two<T: Element>(Parameter<T>, Parameter<T>);
        impl<T: Element> ParamModule<T> for Two<T> {
            fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
                out.push(&self.0);
                out.push(&self.1);
            }
        }
        let m = Two(
            Parameter::<f64>::new("same", vec![0.0], &[1]).unwrap(),
            Parameter::<f64>::new("same", vec![0.0], &[1]).unwrap(),
        );
        assert!(registry(&m).is_err());
    }
}
