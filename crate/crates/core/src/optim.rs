//! Optimizers: RAdam for the VQ-VAE generator/discriminator, Adam under a
//! Noam schedule for the Transformer and the LSTM LM.

use crate::tensor::ParamStore;
use serde::{Deserialize, Serialize};

/// Noam schedule: lr = dim^-0.5 * min(step^-0.5, step * warmup^-1.5).
pub fn noam_lr(step: usize, model_dim: usize, warmup: usize) -> f64 {
    assert!(step >= 1, "noam_lr is undefined at step 0");
    let s = step as f64;
    let w = warmup as f64;
    (model_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Scale all gradients down so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Per-parameter first/second moment state, serialized into checkpoints.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MomentState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: usize,
}

impl MomentState {
    fn ensure(&mut self, store: &ParamStore) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
            self.v = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        }
    }
}

/// Rectified Adam (Liu et al.): falls back to an unadapted momentum update
/// while the variance estimate is untrustworthy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: MomentState,
}

impl RAdam {
    pub fn new(lr: f64) -> Self {
        RAdam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: MomentState::default() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) {
        self.state.ensure(store);
        self.state.step += 1;
        let t = self.state.step as f64;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let b2t = b2.powf(t);
        let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        let bias1 = 1.0 - b1.powf(t);
        let rect = if rho_t > 4.0 {
            Some(
                (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt(),
            )
        } else {
            None
        };
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            let p = &mut store.get_mut(crate::tensor::ParamId(i)).data;
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bias1;
                match rect {
                    Some(r) => {
                        let v_hat = (v[j] / (1.0 - b2t)).sqrt();
                        p[j] -= self.lr * r * m_hat / (v_hat + self.eps);
                    }
                    None => {
                        p[j] -= self.lr * m_hat;
                    }
                }
            }
        }
    }
}

/// Adam driven by an externally supplied learning rate (the Noam schedule).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: MomentState,
}

impl Adam {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.98, eps: 1e-9, state: MomentState::default() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) {
        self.state.ensure(store);
        self.state.step += 1;
        let t = self.state.step as f64;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            let p = &mut store.get_mut(crate::tensor::ParamId(i)).data;
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                p[j] -= lr * (m[j] / bias1) / ((v[j] / bias2).sqrt() + self.eps);
            }
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}
