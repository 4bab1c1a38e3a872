//! Adam optimizer with bias correction.

use crate::error::AdError;

/// Optimizer state over an ordered collection of parameter groups.
///
/// Moments are kept per entry and the step counter is shared; each call to
/// [`AdamState::step`] must pass the groups in the order given at
/// construction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(group_sizes: &[usize], learning_rate: f64) -> Self {
        AdamState {
            m: group_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: group_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over all groups.
    ///
    /// Nothing is mutated unless every gradient entry is finite and all
    /// shapes agree, so a failed step leaves parameters and moments intact.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), AdError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(AdError::shape(
                "adam_step",
                format!(
                    "expected {} groups, got {} params / {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(AdError::shape(
                    "adam_step",
                    format!("group {i}: state {} / param {} / grad {}", self.m[i].len(), p.len(), g.len()),
                ));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(AdError::NonFinite { op: "adam_step" });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
