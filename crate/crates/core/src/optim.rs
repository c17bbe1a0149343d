//! Adam over flat parameter blocks, and the robust penalties shared by the
//! bundle adjustment and the motion-field regularizer.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter block.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected update. Non-finite parameters (masked entries such
    /// as invalid depths) are left alone.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            if !params[i].is_finite() {
                continue;
            }
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// `0.5 x^2` inside `|x| <= delta`, `delta (|x| - delta/2)` outside.
/// Returns value and derivative.
#[inline]
pub fn huber(x: f64, delta: f64) -> (f64, f64) {
    let a = x.abs();
    if a <= delta {
        (0.5 * x * x, x)
    } else {
        (delta * (a - 0.5 * delta), delta * x.signum())
    }
}

/// Huber scaled by `1/delta`: an L1 penalty with a quadratic core, slope 1
/// outside `delta`.
#[inline]
pub fn smooth_l1(x: f64, delta: f64) -> (f64, f64) {
    let (v, d) = huber(x, delta);
    (v / delta, d / delta)
}
