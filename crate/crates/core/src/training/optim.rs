use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// AdamW hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// First and second moments for every parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Scalar> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        OptimState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

impl AdamW {
    /// One update with decoupled weight decay: `p <- p (1 - lr wd)`, then the
    /// bias-corrected Adam step. `grads` is indexed like the store.
    pub fn step<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        state: &mut OptimState<T>,
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() || state.m.len() != store.len() {
            return Err(Error::Usage(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                state.m.len(),
                store.len()
            )));
        }
        if let Some(i) = grads.iter().position(Option::is_none) {
            let id = store.ids().nth(i).expect("index in range");
            return Err(Error::Usage(format!(
                "parameter `{}` has no gradient",
                store.name(id)
            )));
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = T::from_f64(1.0 - lr * self.weight_decay);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(self.eps);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[i].as_ref().expect("checked above").data();
            let p = store.get_mut(id).data_mut();
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + c1 * g[j];
                v[j] = b2 * v[j] + c2 * g[j] * g[j];
                let denom = v[j].sqrt() * inv_sqrt_bc2 + eps;
                p[j] = p[j] * decay - step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}
