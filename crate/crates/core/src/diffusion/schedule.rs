use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::numerics::Tensor;

/// Which beta sequence to build.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaSchedule {
    /// `1e-4 .. 0.02` over 1000 steps, endpoints scaled by `1000 / T` for other lengths.
    Linear,
    Constant(f64),
}

/// Forward-process coefficients, indexed by `t - 1` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Tensor,
    pub alpha: Tensor,
    pub alpha_bar: Tensor,
    pub posterior_var: Tensor,
}

impl NoiseSchedule {
    pub fn new(kind: BetaSchedule, steps: usize) -> Result<Self, DiffusionError> {
        match kind {
            BetaSchedule::Linear => Self::linear(steps),
            BetaSchedule::Constant(b) => Self::from_betas((0..steps).map(|_| b).collect()),
        }
    }

    pub fn linear(steps: usize) -> Result<Self, DiffusionError> {
        let scale = 1000.0 / steps as f64;
        Self::linear_between(steps, scale * 1e-4, scale * 0.02)
    }

    pub fn linear_between(steps: usize, lo: f64, hi: f64) -> Result<Self, DiffusionError> {
        let betas = (0..steps)
            .map(|k| if steps == 1 { lo } else { lo + (hi - lo) * k as f64 / (steps - 1) as f64 })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        let steps = betas.len();
        if steps == 0 {
            return Err(DiffusionError::Schedule("no steps".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(DiffusionError::Schedule(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_var = (0..steps)
            .map(|k| {
                let prev = if k == 0 { 1.0 } else { alpha_bar[k - 1] };
                betas[k] * (1.0 - prev) / (1.0 - alpha_bar[k])
            })
            .collect();
        Ok(Self {
            steps,
            beta: Tensor::from_vec(betas),
            alpha: Tensor::from_vec(alpha),
            alpha_bar: Tensor::from_vec(alpha_bar),
            posterior_var: Tensor::from_vec(posterior_var),
        })
    }

    pub fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps {
            return Err(DiffusionError::BadStep { t, steps: self.steps });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta.data()[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha.data()[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar.data()[t - 1]
        }
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var.data()[t - 1]
    }

    /// Log posterior variance with the `t = 1` zero replaced by the `t = 2` value.
    pub fn posterior_log_var_clipped(&self, t: usize) -> f64 {
        let v = if t == 1 && self.steps > 1 { self.posterior_var(2) } else { self.posterior_var(t) };
        v.max(f64::MIN_POSITIVE).ln()
    }
}

/// `sqrt(ab) x0 + sqrt(1 - ab) noise`.
pub fn q_sample(s: &NoiseSchedule, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor, DiffusionError> {
    s.check_step(t)?;
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(noise, |x, e| a * x + b * e)?)
}
