//! Adam over flat parameter vectors.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Cosine,
        }
    }
}

impl AdamConfig {
    /// Step size at `step` (0-based) of `total`.
    pub fn rate(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * self.lr * (1.0 + libm::cos(core::f64::consts::PI * frac))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Adam {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One update with step size `lr`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - libm::pow(c.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (libm::sqrt(vh) + c.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let cfg = AdamConfig {
            lr: 0.1,
            schedule: Schedule::Constant,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, 2);
        for _ in 0..500 {
            let g = vec![2.0 * x[0], 2.0 * (x[1] - 1.0)];
            opt.step(&mut x, &g, cfg.lr);
        }
        assert!(x[0].abs() < 1e-2 && (x[1] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = AdamConfig::default();
        assert_eq!(cfg.rate(0, 100), cfg.lr);
        assert!(cfg.rate(99, 100) < 1e-5);
        assert!(cfg.rate(50, 100) < cfg.lr);
    }
}
