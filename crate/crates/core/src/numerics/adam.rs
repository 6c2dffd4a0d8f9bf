use std::collections::BTreeMap;

use super::{GradSet, NumericsError, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first_moment.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second_moment.get(name).map(Vec::as_slice)
    }

    /// Applies one update to every parameter. Parameters without an entry in
    /// `grads` are treated as having zero gradient.
    ///
    /// Nothing is modified when any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet) -> Result<(), NumericsError> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| {
                NumericsError::Invalid(format!("gradient for unknown parameter `{name}`"))
            })?;
            if g.len() != p.len() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::NonFiniteGradient(name.clone()));
            }
        }

        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);

        for (name, p) in params.iter_mut() {
            let n = p.len();
            let m = self
                .first_moment
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .second_moment
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; n]);
            let g = grads.get(name);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
