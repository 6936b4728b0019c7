use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `lr(t) = lr₀ · ½ · (1 + cos(π·t/T))`, clamped to `t ≤ T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: CosineSchedule,
}

impl AdamConfig {
    pub fn new(base_lr: f64, total_steps: u64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: CosineSchedule {
                base_lr,
                total_steps,
            },
        }
    }
}

/// Bias-corrected Adam with a cosine-annealed learning rate.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        self.config.schedule.lr_at(self.step)
    }

    /// Applies one update from the accumulated gradients and clears them.
    /// Fails without touching anything if a parameter lacks a gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(TensorError::Invalid(format!(
                "optimizer tracks {} tensors, got {}",
                self.first.len(),
                params.len()
            )));
        }
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(TensorError::MissingGrad(name.to_string()));
        }
        let lr = self.current_lr();
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let grad = p.grad.take().expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j].widen();
                let mj = beta1 * m[j].widen() + (1.0 - beta1) * g;
                let vj = beta2 * v[j].widen() + (1.0 - beta2) * g * g;
                m[j] = T::cast(mj);
                v[j] = T::cast(vj);
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                if update != 0.0 {
                    *w = T::cast(w.widen() - update);
                }
            }
        }
        Ok(())
    }
}
