use super::{ParamStore, Scalar};
use crate::error::{contract, Result};

/// Moment accumulators of one optimizer run.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step: u64,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub state: AdamState<T>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new(2e-4)
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, state: AdamState::default() }
    }

    /// One update of `params` (parallel slices of parameters and gradients).
    pub fn step_slices(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return contract("adam_step", format!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        if self.state.first_moment.is_empty() {
            self.state.first_moment = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.state.second_moment = self.state.first_moment.clone();
        }
        if self.state.first_moment.len() != params.len() {
            return contract("adam_step", "parameter count changed between steps");
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.state.first_moment[i].len() != p.len() {
                return contract("adam_step", format!("shape mismatch for parameter {i}"));
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(self.learning_rate);
        let eps = T::from_f64_lossy(self.epsilon);
        let one = T::one();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.state.first_moment[i];
            let v = &mut self.state.second_moment[i];
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] = p[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Updates every parameter of `store` from gradients given in store order.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
        let mut params: Vec<&mut [T]> = store.values_mut().iter_mut().map(|t| t.data_mut()).collect();
        let grads: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
        self.step_slices(&mut params, &grads)
    }
}
