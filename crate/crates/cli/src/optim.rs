//! Adaptive-moment optimizer with decoupled weight decay and global
//! gradient-norm clipping, restricted to the trainable parameter mask.

use crate::config::OptimizerConfig;

pub struct Adam {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    mask: Vec<bool>,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig, dim: usize, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), dim);
        Adam {
            cfg,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
            mask,
        }
    }

    /// Global L2 norm of the masked gradient.
    pub fn grad_norm(&self, grad: &[f64]) -> f64 {
        grad.iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(g, _)| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// One update step in place. Returns the pre-clip gradient norm.
    pub fn update(&mut self, theta: &mut [f64], grad: &[f64]) -> f64 {
        assert_eq!(theta.len(), grad.len());
        assert_eq!(theta.len(), self.m.len());
        let norm = self.grad_norm(grad);
        let scale = if norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..theta.len() {
            if !self.mask[i] {
                continue;
            }
            let g = grad[i] * scale;
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            theta[i] -= self.cfg.lr * (m_hat / (v_hat.sqrt() + 1e-8)
                + self.cfg.weight_decay * theta[i]);
        }
        norm
    }
}
