use std::collections::BTreeMap;

use diffcore::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::trainer::config::OptimConfig;

/// Adaptive moments with decoupled weight decay. Moment buffers live in
/// f64; parameters keep their own dtype.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimConfig,
    lr: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self::with_lr(cfg, cfg.lr)
    }

    pub fn with_lr(cfg: &OptimConfig, lr: f64) -> Self {
        AdamW {
            cfg: cfg.clone(),
            lr,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter in `params`; each must have a gradient.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::Usage(format!("no gradient for trainable parameter {name}")))?;
            let p = params.get_mut(&name)?;
            if g.shape() != p.shape() {
                return Err(Error::Usage(format!("gradient shape mismatch for {name}")));
            }
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; n]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi.f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                let wf = w.f64();
                *w = T::of(wf - self.lr * (update + c.weight_decay * wf));
            }
        }
        Ok(())
    }
}
