//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Arr, ParamGrads, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    /// Periodic checkpoint interval in steps; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 2000,
            batch_size: 4,
            grad_clip: 0.0,
            checkpoint_every: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("optimizer step size must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam. Parameters that received no gradient in a
/// step are left untouched.
pub struct AdamW {
    cfg: OptimConfig,
    pub step: u64,
    pub m: Vec<Arr>,
    pub v: Vec<Arr>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: OptimConfig) -> Self {
        let zeros: Vec<Arr> = store
            .ids()
            .map(|id| Arr::zeros(store.value(id).raw_dim()))
            .collect();
        AdamW {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Restores moment estimates and the step counter from a checkpoint.
    pub fn restore(&mut self, step: u64, m: Vec<Arr>, v: Vec<Arr>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Config(
                "optimizer state does not match the parameter set".into(),
            ));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &mut ParamGrads) {
        if self.cfg.grad_clip > 0.0 {
            let norm: f64 = grads
                .grads
                .iter()
                .flatten()
                .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > self.cfg.grad_clip {
                grads.scale(self.cfg.grad_clip / norm);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.grads[i].as_ref() else {
                continue;
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g);
            let mut p = store.value(id).as_ref().clone();
            ndarray::Zip::from(&mut p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mh = m / bc1;
                let vh = v / bc2;
                *p -= self.cfg.lr * (mh / (vh.sqrt() + self.cfg.eps) + self.cfg.weight_decay * *p);
            });
            store.set(id, p);
        }
    }
}
