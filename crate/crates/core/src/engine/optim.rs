//! SGD with momentum for model weights, Adam for clipping bounds.

use serde::{Deserialize, Serialize};

use super::param::{ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    SgdMomentum(SgdConfig),
    Adam(AdamConfig),
}

/// Optimizer configuration plus per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    steps: u64,
    /// Velocity (SGD) or first moment (Adam), indexed by `ParamId`.
    first: Vec<Option<Vec<f64>>>,
    /// Second moment (Adam only).
    second: Vec<Option<Vec<f64>>>,
}

impl OptimizerState {
    pub fn sgd(cfg: SgdConfig) -> Self {
        Self::new(OptimizerKind::SgdMomentum(cfg))
    }

    pub fn adam(cfg: AdamConfig) -> Self {
        Self::new(OptimizerKind::Adam(cfg))
    }

    fn new(kind: OptimizerKind) -> Self {
        OptimizerState {
            kind,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[f64]> {
        self.first.get(id.0).and_then(|v| v.as_deref())
    }

    /// Seeds the momentum buffer of one parameter.
    pub fn set_velocity(&mut self, id: ParamId, v: Vec<f64>) {
        if self.first.len() <= id.0 {
            self.first.resize(id.0 + 1, None);
        }
        self.first[id.0] = Some(v);
    }

    fn buffers(&mut self, id: ParamId, n: usize) -> Result<(&mut Vec<f64>, &mut Vec<f64>)> {
        if self.first.len() <= id.0 {
            self.first.resize(id.0 + 1, None);
            self.second.resize(id.0 + 1, None);
        }
        if self.second.len() <= id.0 {
            self.second.resize(id.0 + 1, None);
        }
        let first = self.first[id.0].get_or_insert_with(|| vec![0.0; n]);
        let second = self.second[id.0].get_or_insert_with(|| vec![0.0; n]);
        if first.len() != n || second.len() != n {
            return Err(Error::Optimizer(format!(
                "moment buffer of param {} has {} entries, parameter has {n}",
                id.0,
                first.len()
            )));
        }
        Ok((first, second))
    }

    /// `v <- mu*v + g + lambda*theta; theta <- theta - lr*v` for every listed
    /// parameter. `lr_scale` multiplies the configured learning rate.
    pub fn sgd_momentum_step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr_scale: f64) -> Result<()> {
        let OptimizerKind::SgdMomentum(cfg) = self.kind else {
            return Err(Error::Optimizer("sgd_momentum_step on a non-SGD optimizer".into()));
        };
        self.steps += 1;
        let lr = cfg.lr * lr_scale;
        for &id in ids {
            let p = store.get(id);
            if p.grad.shape() != p.value.shape() {
                return Err(Error::Optimizer(format!("gradient shape mismatch for {}", p.name)));
            }
            let n = p.value.numel();
            let (vel, _) = self.buffers(id, n)?;
            let p = store.get_mut(id);
            let grad = p.grad.data().to_vec();
            for ((theta, v), g) in p.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *theta;
                *theta -= lr * *v;
            }
        }
        Ok(())
    }

    /// Bias-corrected Adam update. The step counter is incremented first.
    pub fn adam_step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr_scale: f64) -> Result<()> {
        let OptimizerKind::Adam(cfg) = self.kind else {
            return Err(Error::Optimizer("adam_step on a non-Adam optimizer".into()));
        };
        for &id in ids {
            let p = store.get(id);
            if !p.grad.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("Adam gradient of {}", p.name),
                });
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let lr = cfg.lr * lr_scale;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for &id in ids {
            let n = store.get(id).value.numel();
            let (m, v) = self.buffers(id, n)?;
            let p = store.get_mut(id);
            let grad = p.grad.data().to_vec();
            for (((theta, m), v), g) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(grad)
            {
                let g = g + cfg.weight_decay * *theta;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Dispatches on `kind` over every parameter of `group`.
    pub fn step_group(&mut self, store: &mut ParamStore, group: ParamGroup, lr_scale: f64) -> Result<()> {
        let ids = store.ids_in(group);
        match self.kind {
            OptimizerKind::SgdMomentum(_) => self.sgd_momentum_step(store, &ids, lr_scale),
            OptimizerKind::Adam(_) => self.adam_step(store, &ids, lr_scale),
        }
    }
}
