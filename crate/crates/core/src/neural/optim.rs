use super::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear ramp from 0 to `lr` over this many steps.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps: 0, clip_norm: 0.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0) {
            errs.push(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            errs.push("Adam betas must be in [0, 1)".to_string());
        }
        if !(self.eps > 0.0) {
            errs.push("Adam epsilon must be positive".to_string());
        }
        if self.clip_norm < 0.0 {
            errs.push("clip_norm must be non-negative".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Adam over every trainable parameter of a store. Moments are kept in `f64`
/// regardless of the parameter type.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 {
            self.config.lr
        } else {
            self.config.lr * ((self.step + 1) as f64 / w as f64).min(1.0)
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Frozen parameters are never written.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
            self.v = self.m.clone();
        }
        let lr = self.current_lr();
        self.step += 1;
        let scale = if self.config.clip_norm > 0.0 {
            let sq: f64 = store
                .iter()
                .filter(|(_, p)| p.trainable)
                .filter_map(|(_, p)| p.tensor.grad.as_ref())
                .flat_map(|g| g.iter().map(|x| x.f64() * x.f64()))
                .sum();
            let n = sq.sqrt();
            if n > self.config.clip_norm {
                self.config.clip_norm / n
            } else {
                1.0
            }
        } else {
            1.0
        };
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                p.tensor.grad = None;
                continue;
            }
            let Some(g) = p.tensor.grad.as_mut() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, gi), (mi, vi)) in p.tensor.data.iter_mut().zip(g.iter_mut()).zip(m.iter_mut().zip(v.iter_mut())) {
                let gr = gi.f64() * scale;
                *mi = beta1 * *mi + (1.0 - beta1) * gr;
                *vi = beta2 * *vi + (1.0 - beta2) * gr * gr;
                let update = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *w -= T::of(update);
                *gi = T::zero();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", vec![2], vec![3.0, -2.0]);
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
        for _ in 0..500 {
            let x = store.value(id).to_vec();
            store.get_mut(id).tensor.grad = Some(x.iter().map(|v| 2.0 * v).collect());
            adam.step(&mut store);
        }
        assert!(store.value(id).iter().all(|v| v.abs() < 1e-2), "{:?}", store.value(id));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", vec![1], vec![1.0]);
        store.get_mut(id).tensor.grad = Some(vec![0.5]);
        let mut adam = Adam::new(AdamConfig { lr: 0.01, ..AdamConfig::default() });
        adam.step(&mut store);
        assert!((store.value(id)[0] - 0.99).abs() < 1e-6);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("x", vec![1], vec![1.0]);
        store.set_trainable(id, false);
        store.get_mut(id).tensor.grad = Some(vec![1.0]);
        Adam::new(AdamConfig::default()).step(&mut store);
        assert_eq!(store.value(id), &[1.0]);
    }

    #[test]
    fn warmup_is_linear() {
        let mut adam = Adam::new(AdamConfig { lr: 1.0, warmup_steps: 4, ..AdamConfig::default() });
        let mut store = ParamStore::<f64>::new();
        store.add("x", vec![1], vec![0.0]);
        let mut lrs = Vec::new();
        for _ in 0..6 {
            lrs.push(adam.current_lr());
            adam.step(&mut store);
        }
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }
}
