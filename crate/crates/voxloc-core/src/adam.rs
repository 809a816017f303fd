//! Adam optimizer with bias-corrected moment estimates.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
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

/// Per-parameter first/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u32,
}

impl AdamState {
    /// Zero-initialized moments shaped after `params`.
    pub fn new(params: &[&Tensor], cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u32 {
        self.t
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }
}

/// One Adam update: `p -= lr · m̂ / (√v̂ + ε)` with bias-corrected moments.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Vec<f32>], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "{} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "param {i} has {} elements, gradient has {}",
                    p.numel(),
                    g.len()
                ),
            });
        }
    }
    state.t += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.cfg;
    let bias1 = 1.0 - beta1.powi(state.t as i32);
    let bias2 = 1.0 - beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let data = p.data_mut();
        for i in 0..g.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f32) -> Tensor {
        Tensor::scalar(v).with_requires_grad()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = scalar_param(1.5);
        let mut state = AdamState::new(&[&p], AdamConfig::default());
        adam_step(&mut [&mut p], &[vec![0.0]], &mut state).unwrap();
        assert_eq!(p.data(), &[1.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // g = 1: m̂ = 1, v̂ = 1 after bias correction, so Δ = −lr/(1 + ε)
        let mut p = scalar_param(0.0);
        let cfg = AdamConfig::with_lr(0.1);
        let mut state = AdamState::new(&[&p], cfg);
        adam_step(&mut [&mut p], &[vec![1.0]], &mut state).unwrap();
        let expected = -0.1f32 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-9, "got {}", p.data()[0]);
    }

    #[test]
    fn zero_betas_give_signed_scaled_descent() {
        // β1 = β2 = 0 collapses the moments to m = g, v = g², so a single
        // scalar step is exactly Δ = −lr·g/(|g| + ε).
        let g = -0.37f32;
        let cfg = AdamConfig {
            lr: 0.05,
            beta1: 0.0,
            beta2: 0.0,
            eps: 3.0,
        };
        let mut p = scalar_param(2.0);
        let mut state = AdamState::new(&[&p], cfg);
        adam_step(&mut [&mut p], &[vec![g]], &mut state).unwrap();
        let expected = 2.0 - cfg.lr * g / (g.abs() + cfg.eps);
        assert_eq!(p.data()[0], expected);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Tensor::new(vec![3], vec![0.2, -0.4, 1.0])
                .unwrap()
                .with_requires_grad();
            let mut state = AdamState::new(&[&p], AdamConfig::with_lr(0.01));
            for step in 0..100 {
                let g: Vec<f32> = p
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * 0.3 + (step as f32 * 0.01) - i as f32 * 0.1)
                    .collect();
                adam_step(&mut [&mut p], &[g], &mut state).unwrap();
            }
            p.data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = scalar_param(0.0);
        let mut state = AdamState::new(&[&p], AdamConfig::default());
        assert!(adam_step(&mut [&mut p], &[vec![1.0, 2.0]], &mut state).is_err());
    }
}
