//! Named parameters and the Adam optimizer.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable tensor with a hierarchical name (e.g. `word.accuracy.dense.w`).
/// Names are unique within a model and drive checkpoint layout.
#[derive(Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Parameter {
        let name = name.into();
        debug_assert!(tensor.requires_grad(), "parameter '{}' must track gradients", name);
        Parameter { name, tensor }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

/// Total element count across a parameter list.
pub fn count_params(params: &[Parameter]) -> usize {
    params.iter().map(Parameter::numel).sum()
}

/// Clear accumulated gradients on every parameter.
pub fn zero_grads(params: &[Parameter]) {
    for p in params {
        p.tensor.zero_grad();
    }
}

/// Adam with bias correction. Moment buffers are keyed by position in the
/// parameter list, so the list order must stay fixed across steps.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Gradients must be populated on every parameter; they are
    /// left untouched (the caller zeroes them).
    pub fn step(&mut self, params: &[Parameter]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(
            self.m.len(),
            params.len(),
            "adam: parameter list changed size between steps"
        );
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, p) in params.iter().enumerate() {
            let grad = p
                .tensor
                .grad()
                .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            p.tensor.with_data_mut(|data| {
                for i in 0..data.len() {
                    let g = grad[i];
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let t = Tensor::new_grad(vec![0.5, -1.5], &[2]);
        t.mul(&Tensor::zeros(&[2])).sum_all().backward();
        let p = Parameter::new("p", t.clone());
        let before = t.to_vec();
        let mut opt = Adam::new(1e-3);
        opt.step(&[p]).unwrap();
        assert_eq!(t.to_vec(), before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        // Hand evaluation at t=1: m_hat = g, v_hat = g^2, so the update is
        // lr * g / (|g| + eps) = lr / (1 + eps) for g = 1.
        let t = Tensor::new_grad(vec![0.0], &[1]);
        t.sum_all().backward(); // grad = 1
        let p = Parameter::new("p", t.clone());
        let mut opt = Adam::new(1e-3);
        opt.step(&[p]).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((t.to_vec()[0] - expected).abs() < 1e-15);
        assert!((t.to_vec()[0] + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let t = Tensor::new_grad(vec![0.0], &[1]);
        let p = Parameter::new("naked", t);
        let mut opt = Adam::new(1e-3);
        let err = opt.step(&[p]).unwrap_err();
        assert!(err.to_string().contains("naked"));
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // Oracle: run the optimization itself on f(p) = (p - 2)^2.
        let t = Tensor::new_grad(vec![0.0], &[1]);
        let p = Parameter::new("p", t.clone());
        let target = Tensor::scalar(2.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..100 {
            let diff = t.sub(&target);
            let loss = diff.mul(&diff).sum_all();
            loss.backward();
            opt.step(std::slice::from_ref(&p)).unwrap();
            zero_grads(std::slice::from_ref(&p));
        }
        assert!(
            (t.to_vec()[0] - 2.0).abs() < 0.05,
            "ended at {}",
            t.to_vec()[0]
        );
    }

    #[test]
    fn gradients_untouched_by_step() {
        let t = Tensor::new_grad(vec![1.0], &[1]);
        t.mul(&t).sum_all().backward();
        let before = t.grad().unwrap();
        let p = Parameter::new("p", t.clone());
        Adam::new(1e-3).step(&[p]).unwrap();
        assert_eq!(t.grad().unwrap(), before);
    }
}
