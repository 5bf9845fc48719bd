//! Adam with decoupled weight decay, global-norm clipping and EMA shadows.

use std::collections::BTreeMap;

use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 8e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2, grad_clip: Some(0.02) }
    }
}

/// Single AdamW update of `param` in place. `step` is 1-based.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    step: u64,
    cfg: &AdamConfig,
) -> Result<(), NumericsError> {
    if param.shape() != grad.shape() || m.shape() != grad.shape() || v.shape() != grad.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "adam_step",
            detail: format!("param {:?} grad {:?}", param.shape(), grad.shape()),
        });
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let p = param.data_mut();
    let (md, vd) = (m.data_mut(), v.data_mut());
    for i in 0..p.len() {
        let g = grad.data()[i];
        md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * g;
        vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = md[i] / bc1;
        let vhat = vd[i] / bc2;
        p[i] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
    }
    param.ensure_finite("adam_step")
}

/// Optimizer moments for a named parameter set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    /// Apply one update to every parameter that has a gradient. Returns the pre-clip gradient norm.
    pub fn update(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        cfg: &AdamConfig,
    ) -> Result<f64, NumericsError> {
        let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
        let factor = match cfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                return Err(NumericsError::ShapeMismatch { op: "adam", detail: format!("unknown parameter {name}") });
            };
            let g = if factor == 1.0 { g.clone() } else { g.scale(factor) };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            adam_step(p, &g, m, v, self.step, cfg)?;
        }
        Ok(norm)
    }
}

/// Exponential moving average of parameters: `shadow = rate*shadow + (1-rate)*param`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub rate: f64,
    pub shadow: BTreeMap<String, Tensor>,
}

impl Ema {
    pub fn new(rate: f64, params: &BTreeMap<String, Tensor>) -> Self {
        Self { rate, shadow: params.clone() }
    }

    pub fn update(&mut self, params: &BTreeMap<String, Tensor>) {
        let r = self.rate;
        for (name, p) in params {
            match self.shadow.get_mut(name) {
                Some(s) => {
                    for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
                        *sv = r * *sv + (1.0 - r) * pv;
                    }
                }
                None => {
                    self.shadow.insert(name.clone(), p.clone());
                }
            }
        }
    }

    /// Order-stable checksum of the shadow weights, for metrics logs.
    pub fn checksum(&self) -> f64 {
        self.shadow.values().map(|t| t.data().iter().sum::<f64>()).sum()
    }
}
