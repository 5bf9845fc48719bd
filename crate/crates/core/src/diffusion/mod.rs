//! Forward corruption, reverse steps, samplers and the epsilon-prediction loss.

mod sampler;
mod schedule;

pub use sampler::{sample_loop, EpsHook, SampleOptions, Sampler, TrajectoryLog};
pub use schedule::{q_sample, BetaSchedule, NoiseSchedule};

use crate::backbone::{forward_packed, BackboneError, Binder, ExecLayout, ForwardItem, ModelOutput, ModelParams};
use crate::compute_model::{LatencyModel, Packing};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::scheduler_guidance::{NfeStats, SchedulerError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffusionError {
    #[error("timestep {t} outside [1, {steps}]")]
    BadStep { t: usize, steps: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("incomplete plan: {0}")]
    IncompletePlan(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Anything that predicts noise for a batch of requests.
pub trait Denoiser {
    /// `[c, h, w]` of inputs.
    fn image_shape(&self) -> [usize; 3];
    fn steps(&self) -> usize;
    fn evaluate(&self, items: &[ForwardItem], packing: Packing) -> Result<(Vec<ModelOutput>, NfeStats), BackboneError>;
}

impl Denoiser for ModelParams {
    fn image_shape(&self) -> [usize; 3] {
        [self.config.c_in, self.config.height, self.config.width]
    }

    fn steps(&self) -> usize {
        self.config.steps
    }

    fn evaluate(&self, items: &[ForwardItem], packing: Packing) -> Result<(Vec<ModelOutput>, NfeStats), BackboneError> {
        let lens: Vec<usize> = items.iter().map(|it| self.config.tokens(it.p)).collect();
        let strategy = packing
            .realize(&lens, self.config.d, self.config.depth, &LatencyModel::default())
            .map_err(|e| BackboneError::Layout(e.to_string()))?;
        let (outs, flops) = self.predict_batch(items, &strategy.layout())?;
        let mut stats = NfeStats { launches: strategy.launches, flops, ..NfeStats::default() };
        for it in items {
            *stats.forwards.entry(it.p).or_default() += 1;
        }
        Ok((outs, stats))
    }
}

/// Exact noise predictor for data `N(mean, var I)`.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    pub schedule: NoiseSchedule,
    pub mean: f64,
    pub var: f64,
    pub shape: [usize; 3],
    /// Also report the exact reverse variance through the variance head.
    pub exact_variance: bool,
}

impl GaussianOracle {
    /// `E[eps | x_t] = sqrt(1-ab) (x_t - sqrt(ab) mean) / (ab var + 1 - ab)`.
    pub fn eps(&self, x: &Tensor, t: usize) -> Tensor {
        let ab = self.schedule.alpha_bar(t);
        let k = (1.0 - ab).sqrt() / (ab * self.var + 1.0 - ab);
        let m = ab.sqrt() * self.mean;
        x.map(|v| k * (v - m))
    }

    /// Variance-head value giving `Var[x_{t-1} | x_t]` exactly.
    pub fn var_logit(&self, t: usize) -> f64 {
        let s = &self.schedule;
        let (ab, prev) = (s.alpha_bar(t), s.alpha_bar(t - 1));
        let c0 = prev.sqrt() * s.beta(t) / (1.0 - ab);
        let x0_var = self.var * (1.0 - ab) / (ab * self.var + 1.0 - ab);
        let v = s.posterior_var(t) + c0 * c0 * x0_var;
        let (lo, hi) = (s.posterior_log_var_clipped(t), s.beta(t).ln());
        2.0 * (v.ln() - lo) / (hi - lo) - 1.0
    }
}

impl Denoiser for GaussianOracle {
    fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn steps(&self) -> usize {
        self.schedule.steps
    }

    fn evaluate(&self, items: &[ForwardItem], _packing: Packing) -> Result<(Vec<ModelOutput>, NfeStats), BackboneError> {
        let mut stats = NfeStats { launches: 1, ..NfeStats::default() };
        let mut outs = Vec::with_capacity(items.len());
        for it in items {
            if it.t == 0 || it.t > self.schedule.steps {
                return Err(BackboneError::BadStep { t: it.t, steps: self.schedule.steps });
            }
            *stats.forwards.entry(it.p).or_default() += 1;
            let var_logits = if self.exact_variance && it.t > 1 {
                Some(Tensor::full(it.x.shape(), self.var_logit(it.t)))
            } else {
                None
            };
            outs.push(ModelOutput { eps: self.eps(&it.x, it.t), var_logits });
        }
        Ok((outs, stats))
    }
}

/// Reverse-step mean `(x_t - beta_t / sqrt(1 - ab_t) eps) / sqrt(alpha_t)`.
pub fn posterior_mean(s: &NoiseSchedule, x: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor, DiffusionError> {
    s.check_step(t)?;
    let c = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    let inv = 1.0 / s.alpha(t).sqrt();
    Ok(x.zip_map(eps, |xv, e| inv * (xv - c * e))?)
}

/// Per-pixel reverse variance: fixed posterior variance, or an interpolation in
/// log space between `beta_t` and the clipped posterior variance.
pub fn step_variance(s: &NoiseSchedule, t: usize, var_logits: Option<&Tensor>, shape: &[usize]) -> Tensor {
    match var_logits {
        None => Tensor::full(shape, s.posterior_var(t)),
        Some(v) => {
            let (lo, hi) = (s.posterior_log_var_clipped(t), s.beta(t).ln());
            v.map(|r| {
                let frac = (r + 1.0) / 2.0;
                (frac * hi + (1.0 - frac) * lo).exp()
            })
        }
    }
}

/// One ancestral step. No noise is added at `t = 1`.
pub fn p_sample_step(
    s: &NoiseSchedule,
    x: &Tensor,
    t: usize,
    out: &ModelOutput,
    z: &Tensor,
) -> Result<Tensor, DiffusionError> {
    let mean = posterior_mean(s, x, t, &out.eps)?;
    if t == 1 {
        return Ok(mean);
    }
    let var = step_variance(s, t, out.var_logits.as_ref(), x.shape());
    let noise = var.zip_map(z, |v, zz| v.sqrt() * zz)?;
    Ok(mean.add(&noise)?)
}

/// Deterministic DDIM step with `eta = 0`.
pub fn ddim_step(s: &NoiseSchedule, x: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor, DiffusionError> {
    s.check_step(t)?;
    let (ab, prev) = (s.alpha_bar(t), s.alpha_bar(t - 1));
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (prev.sqrt(), (1.0 - prev).sqrt());
    Ok(x.zip_map(eps, |xv, e| pa * (xv - sb * e) / sa + pb * e)?)
}

/// Squared error summed over pixels, averaged over the batch.
pub fn eps_mse(pred: &[Tensor], noise: &[Tensor]) -> Result<f64, DiffusionError> {
    let mut total = 0.0;
    for (p, n) in pred.iter().zip(noise) {
        total += p.sub(n)?.sq_norm();
    }
    Ok(total / pred.len().max(1) as f64)
}

/// Differentiable epsilon loss of noised items against their noise targets.
pub fn eps_mse_loss<'t>(
    b: &Binder<'t, '_>,
    items: &[ForwardItem],
    noises: &[Tensor],
    layout: &ExecLayout,
) -> Result<Var<'t>, DiffusionError> {
    let tape: &'t Tape = b.tape();
    let trace = forward_packed(b, items, layout)?;
    let mut total: Option<Var<'t>> = None;
    for (out, noise) in trace.outputs.iter().zip(noises) {
        let n = noise.numel();
        let full = out.value().numel();
        let pred = out.reshape(&[1, full])?;
        let pred = if full == n { pred } else { pred.slice_cols(0, n)? };
        let target = tape.constant(noise.reshaped(&[1, n])?);
        let term = pred.sub(&target)?.square()?.sum()?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    let total = total.ok_or_else(|| DiffusionError::IncompletePlan("empty batch".into()))?;
    Ok(total.scale(1.0 / items.len() as f64)?)
}

#[cfg(test)]
mod tests;
