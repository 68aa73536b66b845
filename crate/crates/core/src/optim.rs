//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter set, aligned with its order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every tensor in `params`. A non-finite gradient aborts
    /// before anything is modified.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::dim(
                "adam",
                "parameter count",
                params.len(),
                grads.len(),
            ));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim("adam", "gradient", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    term: format!("gradient of {name}"),
                    iteration: self.step + 1,
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let n = g.len();
            let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
            let mut p = Vec::with_capacity(n);
            let old = params.tensors().nth(i).expect("aligned");
            for j in 0..n {
                let gj = g.data()[j];
                let mj = beta1 * self.m[i].data()[j] + (1.0 - beta1) * gj;
                let vj = beta2 * self.v[i].data()[j] + (1.0 - beta2) * gj * gj;
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                m.push(mj);
                v.push(vj);
                p.push(old.data()[j] - update);
            }
            let shape = g.shape();
            self.m[i] = Tensor::new(shape, m)?;
            self.v[i] = Tensor::new(shape, v)?;
            params.set_at(i, Tensor::new(shape, p)?);
        }
        Ok(())
    }

    /// Moments as named tensors under `prefix` ("<prefix>m.<name>", "<prefix>v.<name>").
    pub fn export(&self, params: &ParamSet, prefix: &str, out: &mut ParamSet) {
        for ((name, _), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            out.insert(format!("{prefix}m.{name}"), m.clone());
            out.insert(format!("{prefix}v.{name}"), v.clone());
        }
    }

    pub fn import(
        config: AdamConfig,
        step: u64,
        params: &ParamSet,
        prefix: &str,
        from: &ParamSet,
    ) -> Result<Self> {
        let mut adam = Adam::new(config, params);
        adam.step = step;
        for (i, (name, p)) in params.iter().enumerate() {
            for (which, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let t = from.require(&format!("{prefix}{which}.{name}"))?;
                if t.shape() != p.shape() {
                    return Err(Error::dim("adam import", "moment", p.shape(), t.shape()));
                }
                *slot = t.clone();
            }
        }
        Ok(adam)
    }
}
