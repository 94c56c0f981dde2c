//! Adam with bias correction and a multi-step learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<T: Real> Adam<T> {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. A non-finite
    /// gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of '{name}'")));
            }
            match params.get(name) {
                Some(p) if p.shape() == g.shape() => {}
                Some(p) => return Err(Error::shape("adam", p.shape(), g.shape())),
                None => return Err(Error::Contract(format!("gradient for unknown parameter '{name}'"))),
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let one = T::one();
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning rate multiplied by `decay` at each milestone fraction of the run.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiStep {
    pub base: f64,
    pub total: usize,
    pub milestones: Vec<f64>,
    pub decay: f64,
}

impl MultiStep {
    /// Iteration indices (0-based) from which each decay applies.
    pub fn milestone_iters(&self) -> Vec<usize> {
        self.milestones
            .iter()
            .map(|m| (m * self.total as f64).round() as usize)
            .collect()
    }

    /// Learning rate for 0-based iteration `it`.
    pub fn lr(&self, it: usize) -> f64 {
        let k = self.milestone_iters().iter().filter(|&&m| it >= m).count();
        self.base * self.decay.powi(k as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::scalar(0.0));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::scalar(1.0));
        let mut adam = Adam::default();
        adam.step(&mut p, &g, 0.1).unwrap();
        // -lr * 1 / (1 + eps)
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().item() - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_keeps_weights() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::from_f64(&[2], &[0.3, -2.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::zeros(&[2]));
        let mut adam = Adam::default();
        for _ in 0..3 {
            adam.step(&mut p, &g, 0.1).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[0.3, -2.0]);
    }

    #[test]
    fn nan_gradient_names_tensor() {
        let mut p = ParamStore::<f64>::new();
        p.insert("blocks.0.w", Tensor::scalar(1.0));
        let mut g = BTreeMap::new();
        g.insert("blocks.0.w".to_string(), Tensor::scalar(f64::NAN));
        let err = Adam::default().step(&mut p, &g, 0.1).unwrap_err();
        assert!(err.to_string().contains("blocks.0.w"), "{err}");
        assert_eq!(p.get("blocks.0.w").unwrap().item(), 1.0);
    }

    #[test]
    fn schedule_decays_three_times() {
        let s = MultiStep {
            base: 4e-4,
            total: 1000,
            milestones: vec![0.5, 0.75, 0.9],
            decay: 0.5,
        };
        assert_eq!(s.lr(0), 4e-4);
        assert_eq!(s.lr(499), 4e-4);
        assert_eq!(s.lr(500), 2e-4);
        assert_eq!(s.lr(800), 1e-4);
        assert!((s.lr(900) - 5e-5).abs() < 1e-18);
    }
}
