use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor with its gradient buffer and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        }
    }
}

/// Hyperparameters of the Adam update.
#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    /// Glorot-uniform weight for a layer with the given fans.
    pub fn insert_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"));
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Graph(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Graph(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Copies parameter values (not gradients or moments).
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, value) in snapshot {
            let p = self.get_mut(name)?;
            if p.value.shape() != value.shape() {
                return Err(Error::shape(
                    "restore",
                    format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
                ));
            }
            p.value = value.clone();
        }
        Ok(())
    }

    /// Applies one bias-corrected Adam update in name order, then zeroes the
    /// gradients.
    pub fn adam_step(&mut self, opt: &Adam) -> Result<()> {
        for (name, p) in &self.params {
            if !p.grad.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter `{name}`"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        for p in self.params.values_mut() {
            let Param { value, grad, m, v } = p;
            for (((w, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= opt.lr * mh / (vh.sqrt() + opt.eps);
            }
            grad.fill(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(w: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::scalar(w));
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut ps = scalar_set(0.7);
        ps.adam_step(&Adam::new(0.1)).unwrap();
        assert_eq!(ps.value("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [-3.0, 0.5, 40.0] {
            let mut ps = scalar_set(1.0);
            ps.get_mut("w").unwrap().grad.data_mut()[0] = g;
            ps.adam_step(&Adam::new(0.01)).unwrap();
            let moved = 1.0 - ps.value("w").unwrap().data()[0];
            assert!((moved.abs() - 0.01).abs() < 1e-8, "g={g} moved={moved}");
            assert_eq!(moved.signum(), g.signum());
            assert_eq!(ps.get("w").unwrap().grad.data()[0], 0.0);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut ps = scalar_set(1.0);
        let opt = Adam::new(0.01);
        for _ in 0..500 {
            let w = ps.value("w").unwrap().data()[0];
            ps.get_mut("w").unwrap().grad.data_mut()[0] = 2.0 * w;
            ps.adam_step(&opt).unwrap();
        }
        assert!(ps.value("w").unwrap().data()[0].abs() < 0.05);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut ps = scalar_set(1.0);
        ps.insert("bias", Tensor::scalar(0.0));
        ps.get_mut("bias").unwrap().grad.data_mut()[0] = f64::NAN;
        let err = ps.adam_step(&Adam::new(0.01)).unwrap_err();
        assert!(err.to_string().contains("bias"));
    }
}
