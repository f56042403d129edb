//! SGD with momentum and the cosine learning-rate schedule.

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Float;

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← momentum·v + (grad + weight_decay·p)`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<F> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<F>>>,
}

impl<F: Float> Sgd<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates every registered parameter and clears the gradients. All
    /// parameters must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::contract(format!("parameter {} has no gradient", p.name)));
        }
        let ids: Vec<ParamId> = store.ids().collect();
        self.update(store, &ids, lr)
    }

    /// Updates only `ids`; each must carry a gradient.
    pub fn update(&mut self, store: &mut ParamStore<F>, ids: &[ParamId], lr: f64) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let (mom, wd, lr) = (
            F::from_f64(self.momentum),
            F::from_f64(self.weight_decay),
            F::from_f64(lr),
        );
        for &id in ids {
            let param = store.get_mut(id);
            let grad = param
                .grad
                .take()
                .ok_or_else(|| Error::contract(format!("parameter {} has no gradient", param.name)))?;
            let vel = self.velocity[id.0].get_or_insert_with(|| vec![F::zero(); grad.len()]);
            for ((p, v), &g) in param.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad.data()) {
                *v = mom * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

/// `lr(t) = lr_min + ½(lr_max − lr_min)(1 + cos(π·t/T))`, with an optional
/// linear warmup over the first steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl CosineSchedule {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: usize) -> Self {
        Self {
            lr_max,
            lr_min,
            total_steps,
            warmup_steps: 0,
        }
    }

    pub fn with_warmup(mut self, steps: usize) -> Self {
        self.warmup_steps = steps;
        self
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr_max * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = (step - self.warmup_steps).min(span);
        if t == 0 {
            return self.lr_max;
        }
        if t == span {
            return self.lr_min;
        }
        let progress = t as f64 / span as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(p: f64, g: Option<f64>) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::full(&[1], p)).unwrap();
        if let Some(g) = g {
            store.accumulate_grad(id, &[g]);
        }
        (store, id)
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let (mut store, id) = store_with(0.37, Some(5.0));
        let before = store.value(id).to_rten_bytes();
        Sgd::new(0.9, 0.0).step(&mut store, 0.0).unwrap();
        assert_eq!(store.value(id).to_rten_bytes(), before);
        assert!(store.get(id).grad.is_none());
    }

    #[test]
    fn plain_step() {
        let (mut store, id) = store_with(1.0, Some(2.0));
        Sgd::new(0.0, 0.0).step(&mut store, 0.1).unwrap();
        assert!((store.value(id).item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let (mut store, id) = store_with(0.0, Some(1.0));
        let mut sgd = Sgd::new(0.9, 0.0);
        sgd.step(&mut store, 1.0).unwrap();
        store.accumulate_grad(id, &[1.0]);
        sgd.step(&mut store, 1.0).unwrap();
        assert!((store.value(id).item() + 2.9).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut store, _) = store_with(1.0, None);
        assert!(matches!(Sgd::new(0.9, 0.0).step(&mut store, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = CosineSchedule::new(8e-3, 1.6e-6, 1000);
        assert_eq!(s.lr(0), 8e-3);
        assert_eq!(s.lr(1000), 1.6e-6);
        assert!((s.lr(500) - 4.0008e-3).abs() < 1e-12);
        assert!(s.lr(10) > s.lr(11));
    }

    #[test]
    fn warmup_ramps_linearly() {
        let s = CosineSchedule::new(1.0, 0.0, 100).with_warmup(10);
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert_eq!(s.lr(10), 1.0);
        assert_eq!(s.lr(100), 0.0);
    }
}
