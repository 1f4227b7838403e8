use serde::{Deserialize, Serialize};

use crate::param::{Gradients, Matrix, ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed subset of a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub ids: Vec<ParamId>,
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, ps: &ParamSet, ids: Vec<ParamId>) -> Self {
        let first = ids
            .iter()
            .map(|&id| Matrix::zeros(ps.get(id).dim()))
            .collect();
        let second = ids
            .iter()
            .map(|&id| Matrix::zeros(ps.get(id).dim()))
            .collect();
        Self {
            config,
            ids,
            step: 0,
            first,
            second,
        }
    }

    /// Applies one update. Parameters without a gradient keep their value
    /// but still see their moment estimates decay.
    pub fn update(&mut self, ps: &mut ParamSet, grads: &Gradients) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (k, &id) in self.ids.iter().enumerate() {
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            match grads.get(id) {
                Some(g) => {
                    ndarray::Zip::from(&mut *m)
                        .and(&mut *v)
                        .and(g)
                        .for_each(|m, v, &g| {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                        });
                }
                None => {
                    m.mapv_inplace(|x| beta1 * x);
                    v.mapv_inplace(|x| beta2 * x);
                }
            }
            let p = ps.get_mut(id);
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
        }
    }
}
