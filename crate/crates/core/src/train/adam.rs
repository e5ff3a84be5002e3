use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use texvit_autodiff::{ParamStore, Scalar, Tensor};

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments for every trainable parameter, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .trainable()
                .map(|(n, e)| (n.to_string(), Tensor::zeros(e.value.shape().to_vec())))
                .collect::<IndexMap<_, _>>()
        };
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    /// One bias-corrected update from the gradients held in `params`:
    /// `θ ← θ − lr·m̂/(√v̂ + eps)`. Arithmetic is done in `f64`.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, e) in params.iter_mut().filter(|(_, e)| e.trainable) {
            let (Some(m), Some(v)) = (self.m.get_mut(name), self.v.get_mut(name)) else {
                return Err(config_err(format!("optimizer state has no entry for `{name}`")));
            };
            if m.shape() != e.value.shape() || v.shape() != e.value.shape() {
                return Err(config_err(format!(
                    "optimizer state for `{name}` has shape {:?}, parameter has {:?}",
                    m.shape(),
                    e.value.shape()
                )));
            }
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (p, g)) in e.value.data_mut().iter_mut().zip(e.grad.data()).enumerate() {
                let g = g.as_f64();
                let mi = b1 * md[i].as_f64() + (1.0 - b1) * g;
                let vi = b2 * vd[i].as_f64() + (1.0 - b2) * g * g;
                md[i] = T::from_f64_lossy(mi);
                vd[i] = T::from_f64_lossy(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
                *p = T::from_f64_lossy(p.as_f64() - update);
            }
        }
        Ok(())
    }
}
