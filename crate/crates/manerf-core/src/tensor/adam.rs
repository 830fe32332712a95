//! Adam with bias correction.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use super::ParamSet;
use crate::fmath;

/// A gradient contained NaN or infinity; the step was aborted with no
/// parameter mutated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NonFiniteGradient {
    pub param: String,
}

impl fmt::Display for NonFiniteGradient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "non-finite gradient on parameter '{}'", self.param)
    }
}

impl core::error::Error for NonFiniteGradient {}

/// Optimizer state: first/second moment estimates per parameter plus the
/// shared step counter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// One update over every parameter that carries a gradient. Parameters
    /// without a gradient this step (e.g. appearance codes of unsampled
    /// frames) are left untouched, moments included.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), NonFiniteGradient> {
        for (name, p) in params.iter() {
            if !p.grad_all_finite() {
                return Err(NonFiniteGradient { param: name.clone() });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - fmath::powi(self.beta1, self.t as i32);
        let bc2 = 1.0 - fmath::powi(self.beta2, self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(grad) = p.grad.as_deref() else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            assert_eq!(m.len(), grad.len(), "optimizer state shape mismatch for {name}");
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= self.lr * m_hat / (fmath::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }

    /// Checkpoint export: step counter and per-parameter moment vectors.
    pub fn export_state(&self) -> (u64, &BTreeMap<String, Vec<f64>>, &BTreeMap<String, Vec<f64>>) {
        (self.t, &self.m, &self.v)
    }

    pub fn import_state(
        &mut self,
        t: u64,
        m: BTreeMap<String, Vec<f64>>,
        v: BTreeMap<String, Vec<f64>>,
    ) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single_param(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("p", Tensor::scalar(value).with_grad());
        p
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        // With bias correction, m_hat/sqrt(v_hat) = g/|g| on step 1 (up to eps).
        for &g in &[0.3, -2.0, 15.0] {
            let mut params = single_param(1.0);
            params.get_mut("p").grad = Some(vec![g]);
            let mut adam = Adam::new(0.01);
            adam.step(&mut params).unwrap();
            let moved = params.get("p").data[0] - 1.0;
            let expected = -0.01 * g.signum();
            assert!((moved - expected).abs() < 1e-6, "g={g}: moved {moved}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = single_param(2.5);
        let mut adam = Adam::new(0.1);
        for _ in 0..10 {
            params.get_mut("p").grad = Some(vec![0.0]);
            adam.step(&mut params).unwrap();
        }
        assert_eq!(params.get("p").data[0], 2.5);
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimize (p - 3)^2 from p = 0 with lr 0.1 for 100 steps.
        let mut params = single_param(0.0);
        let mut adam = Adam::new(0.1);
        for _ in 0..100 {
            let p = params.get("p").data[0];
            params.get_mut("p").grad = Some(vec![2.0 * (p - 3.0)]);
            adam.step(&mut params).unwrap();
        }
        let p = params.get("p").data[0];
        assert!((p - 3.0).abs() < 0.5, "p = {p}");
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut params = ParamSet::new();
        params.insert("a", Tensor::scalar(1.0).with_grad());
        params.insert("b", Tensor::scalar(2.0).with_grad());
        params.get_mut("a").grad = Some(vec![1.0]);
        params.get_mut("b").grad = Some(vec![f64::NAN]);
        let mut adam = Adam::new(0.1);
        let err = adam.step(&mut params).unwrap_err();
        assert_eq!(err.param, "b");
        assert_eq!(params.get("a").data[0], 1.0);
        assert_eq!(adam.t(), 0);
    }
}
