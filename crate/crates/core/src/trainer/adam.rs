//! Bias-corrected Adam over a [`ParamSet`].

use crate::params::ParamSet;
use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates aligned with the parameter set order.
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update: `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`, then
    /// `θ ← θ − lr·m̂/(√v̂ + ε)` with bias-corrected `m̂`, `v̂`. Gradients are
    /// given per parameter in set order; `None` means an all-zero gradient.
    /// Non-trainable parameters are skipped entirely.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Option<Vec<f64>>],
        cfg: &AdamConfig,
    ) -> Result<(), TensorError> {
        if grads.len() != self.m.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![self.m.len()],
                rhs: vec![grads.len()],
            });
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (ix, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            if let Some(g) = &grads[ix] {
                if g.len() != p.values.len() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        lhs: vec![p.values.len()],
                        rhs: vec![g.len()],
                    });
                }
            }
            let zero = 0.0;
            let m = &mut self.m[ix];
            let v = &mut self.v[ix];
            for c in 0..p.values.len() {
                let g = grads[ix].as_ref().map_or(zero, |g| g[c]);
                m[c] = cfg.beta1 * m[c] + (1.0 - cfg.beta1) * g;
                v[c] = cfg.beta2 * v[c] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[c] / bc1;
                let v_hat = v[c] / bc2;
                p.values[c] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("x", vec![1], vec![value]);
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut ps = single_param(0.75);
        let mut state = AdamState::new(&ps);
        let cfg = AdamConfig::default();
        for _ in 0..3 {
            state.step(&mut ps, &[Some(vec![0.0])], &cfg).unwrap();
        }
        assert_eq!(ps.get("x").values[0].to_bits(), 0.75f64.to_bits());
        state.step(&mut ps, &[None], &cfg).unwrap();
        assert_eq!(ps.get("x").values[0].to_bits(), 0.75f64.to_bits());
    }

    #[test]
    fn first_step_with_unit_gradient_is_minus_lr() {
        let mut ps = single_param(0.0);
        let mut state = AdamState::new(&ps);
        let cfg = AdamConfig::default();
        state.step(&mut ps, &[Some(vec![1.0])], &cfg).unwrap();
        // m̂ = v̂ = 1, so the update is -lr / (1 + ε)
        let want = -1e-3 / (1.0 + 1e-8);
        let got = ps.get("x").values[0];
        assert!((got - want).abs() < 1e-18, "update = {got}");
        assert!((got + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn five_step_trace_matches_reference_implementation() {
        // Minimize f(x) = (x - 3)^2 from x = 0; reference implements the
        // published bias-corrected recurrences independently.
        let cfg = AdamConfig::default();
        let mut ps = single_param(0.0);
        let mut state = AdamState::new(&ps);
        let mut xs = Vec::new();
        for _ in 0..5 {
            let x = ps.get("x").values[0];
            let g = 2.0 * (x - 3.0);
            state.step(&mut ps, &[Some(vec![g])], &cfg).unwrap();
            xs.push(ps.get("x").values[0]);
        }

        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut want = Vec::new();
        for t in 1..=5 {
            let g = 2.0 * (x - 3.0);
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            x -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            want.push(x);
        }
        for (got, want) in xs.iter().zip(want) {
            assert!((got - want).abs() < 1e-15, "trace diverged: {got} vs {want}");
        }
    }

    #[test]
    fn non_trainable_parameters_are_skipped() {
        let mut ps = ParamSet::new();
        ps.add_with("frozen", vec![1], vec![2.0], false);
        let mut state = AdamState::new(&ps);
        state
            .step(&mut ps, &[Some(vec![5.0])], &AdamConfig::default())
            .unwrap();
        assert_eq!(ps.get("frozen").values[0], 2.0);
    }

    #[test]
    fn misaligned_gradients_error() {
        let mut ps = single_param(0.0);
        let mut state = AdamState::new(&ps);
        assert!(state.step(&mut ps, &[], &AdamConfig::default()).is_err());
        assert!(state
            .step(&mut ps, &[Some(vec![1.0, 2.0])], &AdamConfig::default())
            .is_err());
    }
}
