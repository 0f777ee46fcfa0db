//! Adam with decoupled weight decay.

use crate::nn::Parameter;
use crate::tensor::Element;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Per-parameter first/second moment estimates, aligned with the registry
/// order the optimizer was built from.
pub struct Adam<T: Element> {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &[&Parameter<T>]) -> Self {
        Adam {
            cfg,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Restore optimizer state from a checkpoint.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) {
        assert_eq!(m.len(), self.m.len(), "moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "moment count mismatch");
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// One update from the gradients currently accumulated on `params`.
    /// Decoupled weight decay: the decay term is applied directly to the
    /// weights, scaled by the learning rate, outside the moment estimates.
    pub fn step(&mut self, params: &[&Parameter<T>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter set changed");
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let eps = T::from_f64(self.cfg.eps);
        let corr1 = T::from_f64(1.0 - self.cfg.beta1.powi(t));
        let corr2 = T::from_f64(1.0 - self.cfg.beta2.powi(t));
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(lr * self.cfg.weight_decay);

        for (i, p) in params.iter().enumerate() {
            let grad = p.grad_or_zeros();
            let mut data = p.data();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for k in 0..data.len() {
                let g = grad[k];
                m[k] = b1 * m[k] + (one - b1) * g;
                v[k] = b2 * v[k] + (one - b2) * g * g;
                let m_hat = m[k] / corr1;
                let v_hat = v[k] / corr2;
                data[k] = data[k] - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * data[k];
            }
            p.set_data(data);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{self, Tensor};

    #[test]
    fn quadratic_converges_in_100_steps() {
        // loss = (theta - 1)^2 / 2, optimum at 1. The 1e-3 bound at 100
        // steps with lr 0.15 was computed with a scalar oracle first.
        let p = Parameter::<f64>::new("theta", vec![0.0], &[1]).unwrap();
        let params = [&p];
        let mut adam = Adam::new(
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            &params,
        );
        for _ in 0..100 {
            p.zero_grad();
            let t = p.tensor();
            let d = tensor::sub(&t, &Tensor::from_vec(vec![1.0], &[1]).unwrap()).unwrap();
            let loss = tensor::scale(&tensor::sum_all(&tensor::mul(&d, &d).unwrap()), 0.5);
            loss.backward().unwrap();
            adam.step(&params, 0.15);
        }
        let theta = p.data()[0];
        assert!((theta - 1.0).abs() < 1e-3, "theta = {theta}");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let p = Parameter::<f64>::new("theta", vec![1.5, -2.0], &[2]).unwrap();
        let params = [&p];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let t = p.tensor();
        tensor::sum_all(&tensor::mul(&t, &t).unwrap()).backward().unwrap();
        adam.step(&params, 0.0);
        assert_eq!(p.data(), vec![1.5, -2.0]);
    }

    #[test]
    fn matches_scalar_reference_to_1e12() {
        let p = Parameter::<f64>::new("theta", vec![0.7], &[1]).unwrap();
        let params = [&p];
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg.clone(), &params);

        // Scalar reference implementation of the same update rule.
        let mut theta_ref = 0.7f64;
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        for t in 1..=25 {
            p.zero_grad();
            let tens = p.tensor();
            // loss = theta^3 / 3 has gradient theta^2
            let cube = tensor::mul(&tensor::mul(&tens, &tens).unwrap(), &tens).unwrap();
            let loss = tensor::scale(&tensor::sum_all(&cube), 1.0 / 3.0);
            loss.backward().unwrap();
            adam.step(&params, 0.01);

            let g = theta_ref * theta_ref;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            theta_ref = theta_ref - 0.01 * m_hat / (v_hat.sqrt() + cfg.eps)
                - 0.01 * cfg.weight_decay * theta_ref;
            assert!(
                (p.data()[0] - theta_ref).abs() < 1e-12,
                "step {t}: {} vs {theta_ref}",
                p.data()[0]
            );
        }
    }
}
