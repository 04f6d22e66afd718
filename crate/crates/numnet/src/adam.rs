use crate::error::{NetError, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
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

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam optimiser state: first and second moments per parameter array.
///
/// Parameters are minimised, so callers accumulate gradients of a loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .params()
            .iter()
            .map(|p| vec![0.0; p.value.len()])
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter and clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().collect();
        self.step_only(store, &ids)
    }

    /// Applies one update to `ids` only. Every gradient in the store is still
    /// cleared. On a non-finite gradient nothing is modified.
    pub fn step_only(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(NetError::State(format!(
                "optimiser tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for &id in ids {
            if store.grad(id).iter().any(|g| !g.is_finite()) {
                return Err(NetError::Numeric {
                    param: store.name(id).to_string(),
                    step: self.step + 1,
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for &id in ids {
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let grad = store.grad(id).to_vec();
            let value = store.value_mut(id);
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                value[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![0.0]));
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.1), &store);
        store.grad_mut(id)[0] = 1.0;
        adam.step(&mut store).unwrap();
        // m̂ = 1, v̂ = 1, so the move is lr / (1 + ε)
        assert!((store.value(id)[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(store.grad(id)[0], 0.0);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![0.7, -0.2]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(id), &[0.7, -0.2]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![1.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        store.grad_mut(id)[0] = f64::NAN;
        let err = adam.step(&mut store).unwrap_err();
        assert!(matches!(err, NetError::Numeric { .. }));
        assert_eq!(store.value(id), &[1.0]);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn step_only_skips_other_parameters() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0]));
        let b = store.add("b", Tensor::vector(vec![1.0]));
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.5), &store);
        store.grad_mut(a)[0] = 1.0;
        store.grad_mut(b)[0] = 1.0;
        adam.step_only(&mut store, &[a]).unwrap();
        assert!(store.value(a)[0] < 1.0);
        assert_eq!(store.value(b)[0], 1.0);
        assert_eq!(store.grad(b)[0], 0.0);
    }
}
