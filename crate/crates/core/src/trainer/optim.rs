//! AdamW with the update split into its Adam-processed gradient part and the
//! decoupled decay part.

use serde::{Deserialize, Serialize};

use crate::model::{Model, ParamVector};
use crate::nncore::Gradients;

use super::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    /// Peak learning rate η.
    pub lr: f64,
    /// Decoupled weight-decay coefficient ω.
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Linear warmup length in steps (0 disables warmup).
    #[serde(default = "default_warmup")]
    pub warmup: usize,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_eps() -> f64 {
    1e-8
}
fn default_warmup() -> usize {
    50
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            warmup: default_warmup(),
        }
    }
}

impl OptimConfig {
    /// Learning rate for the `t`-th update (1-based).
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * (t as f64 / self.warmup as f64).min(1.0)
        }
    }
}

/// Per-parameter moments plus hyperparameters.
#[derive(Clone, Debug)]
pub struct OptState {
    pub config: OptimConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub t: usize,
}

impl OptState {
    pub fn new(model: &Model, config: OptimConfig) -> Self {
        let m: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// Zeroes the moments and the bias-correction clock.
    pub fn reset(&mut self) {
        for x in self.m.iter_mut().chain(self.v.iter_mut()) {
            x.fill(0.0);
        }
        self.t = 0;
    }
}

/// The two additive components of one AdamW update, per parameter tensor.
#[derive(Clone, Debug)]
pub struct UpdateParts {
    pub grad: Vec<Vec<f64>>,
    pub wd: Vec<Vec<f64>>,
    pub lr: f64,
}

impl UpdateParts {
    pub fn attention(&self, model: &Model) -> (ParamVector, ParamVector) {
        (model.gather_attention(&self.grad), model.gather_attention(&self.wd))
    }
}

/// One AdamW update: `θ ← θ + Δgrad + Δwd` where `Δgrad = -η m̂/(√v̂ + eps)`
/// and `Δwd = -η ω θ_pre` for decayed tensors.
pub fn adamw_update(model: &mut Model, grads: &Gradients, opt: &mut OptState) -> Result<UpdateParts, TrainError> {
    opt.t += 1;
    let c = opt.config.clone();
    let lr = c.lr_at(opt.t);
    let bc1 = 1.0 - c.beta1.powi(opt.t as i32);
    let bc2 = 1.0 - c.beta2.powi(opt.t as i32);
    let mut parts = UpdateParts {
        grad: Vec::with_capacity(model.params.len()),
        wd: Vec::with_capacity(model.params.len()),
        lr,
    };
    for (i, p) in model.params.iter_mut().enumerate() {
        let g = grads
            .get(&p.name)
            .ok_or_else(|| TrainError::MissingGradient(p.name.clone()))?;
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(p.name.clone()));
        }
        let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
        let omega = if p.decay { c.weight_decay } else { 0.0 };
        let theta = p.value.data_mut();
        let mut dg = vec![0.0; theta.len()];
        let mut dw = vec![0.0; theta.len()];
        for j in 0..theta.len() {
            let gj = g.data()[j];
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            dg[j] = -lr * mh / (vh.sqrt() + c.eps);
            dw[j] = -lr * omega * theta[j];
            theta[j] += dg[j] + dw[j];
        }
        parts.grad.push(dg);
        parts.wd.push(dw);
    }
    Ok(parts)
}
