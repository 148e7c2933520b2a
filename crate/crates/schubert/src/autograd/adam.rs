use serde::{Deserialize, Serialize};

use crate::autograd::tensor::Real;

/// Adam hyperparameters. Defaults follow common BERT pre-training practice.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Real>,
    v: Vec<Real>,
    step: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Real] {
        &self.m
    }
}

/// One bias-corrected Adam update. Deterministic given identical inputs.
pub fn adam_step(params: &mut [Real], grads: &[Real], state: &mut AdamState, hp: &AdamParams) {
    assert_eq!(params.len(), grads.len(), "adam_step: grad length mismatch");
    assert_eq!(params.len(), state.m.len(), "adam_step: state length mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_from_fresh_state_leaves_params_unchanged() {
        let mut p = vec![0.7, -1.2];
        let mut state = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut state, &AdamParams::default());
        assert_eq!(p, vec![0.7, -1.2]);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut p = vec![1.0];
        let mut state = AdamState::new(1);
        let hp = AdamParams::default();
        adam_step(&mut p, &[2.0], &mut state, &hp);
        let m_after_first = state.m[0];
        adam_step(&mut p, &[0.0], &mut state, &hp);
        assert!(state.m[0].abs() < m_after_first.abs());
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // Worked out directly from the update rule at t = 1.
        let (lr, b1, b2, eps): (Real, Real, Real, Real) = (0.1, 0.9, 0.999, 1e-8);
        let g: Real = 0.5;
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expected = 1.0 - lr * m_hat / (v_hat.sqrt() + eps);

        let mut p = vec![1.0];
        let mut state = AdamState::new(1);
        adam_step(
            &mut p,
            &[g],
            &mut state,
            &AdamParams {
                lr,
                beta1: b1,
                beta2: b2,
                eps,
            },
        );
        assert!((p[0] - expected).abs() < 1e-7, "{} vs {}", p[0], expected);
    }
}
