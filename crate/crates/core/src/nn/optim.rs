//! Adam / AdamW with the step-decay schedule used across the pipeline.

use super::tensor::{GradSet, ParamSet};
use serde::{Deserialize, Serialize};

/// Adam optimizer; set `weight_decay > 0` for decoupled AdamW behaviour.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: params.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    /// Plain Adam without weight decay.
    pub fn plain(params: &ParamSet, lr: f64) -> Self {
        Self::new(params, lr, 0.9, 0.999, 1e-8, 0.0)
    }

    pub fn adamw(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        Self::new(params, lr, 0.9, 0.999, 1e-8, weight_decay)
    }

    /// One update step. `lr_scale` multiplies the base learning rate, which
    /// is how the step decay is applied.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet, lr_scale: f64) {
        self.t += 1;
        let lr = self.lr * lr_scale;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, param) in params.params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let g = &grads.grads[i];
            for j in 0..param.data.len() {
                let gj = g[j] as f64;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut upd = mhat / (vhat.sqrt() + self.eps);
                if self.weight_decay > 0.0 {
                    upd += self.weight_decay * param.data[j] as f64;
                }
                param.data[j] = (param.data[j] as f64 - lr * upd) as f32;
            }
        }
    }
}

/// Step schedule: multiply the learning rate by `factor` once `decay_at`
/// iterations have elapsed. `decay_at = floor(decay_fraction * total)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LrSchedule {
    pub total_iterations: usize,
    pub decay_at: usize,
    pub factor: f64,
}

impl LrSchedule {
    pub fn step_decay(total_iterations: usize, decay_fraction: f64, factor: f64) -> Self {
        LrSchedule {
            total_iterations,
            decay_at: (decay_fraction * total_iterations as f64).floor() as usize,
            factor,
        }
    }

    pub fn scale_at(&self, iteration: usize) -> f64 {
        if iteration >= self.decay_at {
            self.factor
        } else {
            1.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params = ParamSet::with_seed(1);
        let id = params.register_normal("x", 4, 1.0);
        let mut opt = Adam::plain(&params, 0.1);
        for _ in 0..300 {
            let mut grads = GradSet::zeros_like(&params);
            for j in 0..4 {
                grads.grads[id][j] = 2.0 * params.params[id].data[j];
            }
            opt.step(&mut params, &grads, 1.0);
        }
        for v in &params.params[id].data {
            assert!(v.abs() < 1e-3);
        }
    }

    #[test]
    fn schedule_decays_at_ninety_percent() {
        let s = LrSchedule::step_decay(70_000, 0.9, 0.1);
        assert_eq!(s.decay_at, 63_000);
        assert_eq!(s.scale_at(62_999), 1.0);
        assert_eq!(s.scale_at(63_000), 0.1);
    }

    #[test]
    fn adamw_decays_weights_without_gradient() {
        let mut params = ParamSet::with_seed(2);
        let id = params.register_normal("x", 1, 0.0);
        params.params[id].data[0] = 1.0;
        let mut opt = Adam::adamw(&params, 0.01, 0.1);
        let grads = GradSet::zeros_like(&params);
        opt.step(&mut params, &grads, 1.0);
        assert!(params.params[id].data[0] < 1.0);
    }
}
