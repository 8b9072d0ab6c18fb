//! Adam with decoupled weight decay and per-tensor update clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Divide the step size of each tensor by `max(1, sqrt(mean(g²/v̂)))`.
    pub update_clipping: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            update_clipping: true,
        }
    }
}

impl AdamConfig {
    /// Plain Adam, as used for auxiliary estimator networks.
    pub fn plain(lr: f64) -> Self {
        Self {
            lr,
            weight_decay: 0.0,
            update_clipping: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    /// First and second moments per parameter, indexed by [`ParamId`].
    pub first: Vec<Mat>,
    pub second: Vec<Mat>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, _, m)| Mat::zeros(m.raw_dim())).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Apply one update. Parameters without a gradient entry are left alone.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Mat)]) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads {
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let mut lr = c.lr;
            if c.update_clipping {
                let floor = c.eps * c.eps;
                let ms = g
                    .iter()
                    .zip(v.iter())
                    .map(|(&g, &v)| g * g / (v / bc2).max(floor))
                    .sum::<f64>()
                    / g.len().max(1) as f64;
                lr /= ms.sqrt().max(1.0);
            }
            let p = store.get_mut(*id);
            if c.weight_decay > 0.0 {
                let decay = 1.0 - lr * c.weight_decay;
                p.mapv_inplace(|x| x * decay);
            }
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
            });
        }
    }
}
