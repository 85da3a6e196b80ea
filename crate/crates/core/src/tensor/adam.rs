use serde::{Deserialize, Serialize};

use super::{Float, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// `step` is the 1-based step count after incrementing.
pub fn adam_step<T: Float>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], step: u64, cfg: &AdamConfig) {
    assert!(step >= 1, "Adam step counter starts at 1");
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powf(step as f64));
    let c2 = T::lit(1.0 - cfg.beta2.powf(step as f64));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    let one = T::one();
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Adam state for every trainable tensor of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T: Float = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every tensor in `store` that requires grad.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.step = self
            .step
            .checked_add(1)
            .ok_or_else(|| Error::Numerical("Adam step counter overflow".into()))?;
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
            self.v = self.m.clone();
        }
        for (i, t) in store.tensors_mut().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            if self.m[i].len() != t.numel() {
                return Err(Error::shape("adam", &[self.m[i].len()], t.shape()));
            }
            let (data, grad) = t.data_and_grad_mut();
            adam_step(data, grad, &mut self.m[i], &mut self.v[i], self.step, &self.config);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(grads: &[f64], lr: f64) -> f64 {
        let cfg = AdamConfig::with_lr(lr);
        let (mut p, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        for (i, &g) in grads.iter().enumerate() {
            adam_step(&mut p, &[g], &mut m, &mut v, i as u64 + 1, &cfg);
        }
        p[0]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        assert_eq!(run(&[0.0, 0.0, 0.0], 0.1), 0.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        let p = run(&[1.0], 0.1);
        assert!((p + 0.1 / (1.0 + 1e-8)).abs() < 1e-12, "{p}");
    }

    #[test]
    fn alternating_gradient_drifts_less_than_lr() {
        // step 1: -0.1; step 2: m_hat = (0.09 - 0.1)/0.19, v_hat = 1 -> +0.0526
        let p = run(&[1.0, -1.0], 0.1);
        assert!(p.abs() < 0.1, "{p}");
        let expected = -0.1 / (1.0 + 1e-8) + 0.1 * (0.01 / 0.19) / (1.0 + 1e-8);
        assert!((p - expected).abs() < 1e-9, "{p} vs {expected}");
    }

    #[test]
    fn store_step_skips_frozen() {
        use crate::tensor::Tensor;
        let mut store = ParamStore::<f32>::new();
        let a = store.insert("a", Tensor::full([2], 1.0));
        let b = store.insert("b", Tensor::full([2], 1.0));
        store.get_mut(b).set_requires_grad(false);
        store.get_mut(a).accumulate_grad(&[1.0, -1.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.5));
        opt.step(&mut store).unwrap();
        assert!(store.get(a).data()[0] < 1.0 && store.get(a).data()[1] > 1.0);
        assert_eq!(store.get(b).data(), &[1.0, 1.0]);
    }
}
