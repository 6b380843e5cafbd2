use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    pub grad_clip: f64,
    /// Linear learning-rate warmup length in steps (0 = none).
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            warmup_steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// What a single update did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub lr: f64,
}

/// Rescales `grads` in place so its Euclidean norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let n = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && n > max_norm {
        let s = max_norm / n;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    n
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    /// Restores a state from saved moment buffers.
    pub fn from_parts(config: AdamConfig, m: Vec<f64>, v: Vec<f64>, step: u64) -> Result<Self, NnError> {
        if m.len() != v.len() {
            return Err(NnError::ShapeMismatch {
                what: "Adam moments",
                expected: m.len(),
                got: v.len(),
            });
        }
        Ok(Self { config, m, v, step })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    fn current_lr(&self) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 {
            self.config.lr
        } else {
            self.config.lr * (self.step as f64 / w as f64).min(1.0)
        }
    }

    /// Bias-corrected Adam update after global-norm clipping.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<StepInfo, NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::ShapeMismatch {
                what: "Adam parameters",
                expected: self.m.len(),
                got: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient { index });
        }
        let mut g = grads.to_vec();
        let grad_norm = clip_global_norm(&mut g, self.config.grad_clip);
        self.step += 1;
        let lr = self.current_lr();
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(StepInfo { grad_norm, lr })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(3, cfg(0.1));
        let mut p = vec![1.0, -2.0, 3.0];
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = AdamState::new(1, cfg(0.1));
        let mut p = vec![0.0];
        s.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![6.0, 8.0];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 10.0);
        assert!(((g[0] * g[0] + g[1] * g[1]).sqrt() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn warmup_scales_lr() {
        let mut s = AdamState::new(
            1,
            AdamConfig {
                lr: 1.0,
                warmup_steps: 4,
                ..AdamConfig::default()
            },
        );
        let mut p = vec![0.0];
        let info = s.step(&mut p, &[1.0]).unwrap();
        assert!((info.lr - 0.25).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = AdamState::new(2, cfg(0.1));
        let mut p = vec![0.0; 2];
        assert_eq!(
            s.step(&mut p, &[0.0, f64::NAN]).unwrap_err(),
            NnError::NonFiniteGradient { index: 1 }
        );
        assert_eq!(s.steps(), 0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut s = AdamState::new(2, AdamConfig { grad_clip: 0.0, ..cfg(0.05) });
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            s.step(&mut p, &g).unwrap();
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3), "{p:?}");
    }
}
