//! Adam parameter updates with bias correction.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(param_len: usize, learning_rate: f64) -> Self {
        Self {
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam step; non-finite gradients fail fast.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: params {} / grads {} / state {} lengths differ",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient in adam step".into()));
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2, 1e-3);
        adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_closed_form() {
        // param 0, grad 2, lr 1e-3: bias-corrected m_hat = 2, v_hat = 4,
        // update = -1e-3 * 2 / (2 + eps) ~= -1e-3
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, 1e-3);
        adam_step(&mut p, &[2.0], &mut s).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9, "param = {}", p[0]);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut p = vec![0.5];
        let mut s = AdamState::new(1, 1e-2);
        let mut prev = p[0];
        for _ in 0..2 {
            adam_step(&mut p, &[3.0], &mut s).unwrap();
            assert!(p[0] < prev);
            prev = p[0];
        }
    }

    #[test]
    fn non_finite_gradient_fails_fast() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, 1e-3);
        let err = adam_step(&mut p, &[f64::NAN], &mut s).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
