//! Bootstrapped distribution matching against exposure bias.
//!
//! A short reverse chain starts from a noised data point at `t_target + S`,
//! runs the weak size first and the powerful size last, and its end points are
//! compared with fresh forward samples at `t_target`.

use super::mmd::{mmd2_var, RbfMixture};
use super::TrainError;
use crate::backbone::{forward_packed, Binder, Cond, ExecLayout, FlexMode, ForwardItem};
use crate::compute_model::Packing;
use crate::diffusion::{p_sample_step, q_sample, step_variance, Denoiser, NoiseSchedule};
use crate::numerics::{FlopCounter, SplitRng, Tensor, Var};

/// Patch sizes and step counts of the chain, in execution order.
///
/// Stage `i` covers `t in (t_target + sum_{j>i} s_j, t_target + sum_{j>=i} s_j]`,
/// so the first stage runs at the noisiest steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BootstrapSchedule {
    pub stages: Vec<(usize, usize)>,
}

impl BootstrapSchedule {
    pub fn new(stages: Vec<(usize, usize)>) -> Result<Self, TrainError> {
        let s = Self { stages };
        if s.total() == 0 {
            return Err(TrainError::Bootstrap("chain has no steps (start and target coincide)".into()));
        }
        if s.stages.last().is_some_and(|&(_, n)| n == 0) {
            return Err(TrainError::Bootstrap("the last stage must take at least one step".into()));
        }
        Ok(s)
    }

    /// `weak_steps` at `p_weak`, then `powerful_steps` at `p_powerful`.
    pub fn weak_then_powerful(p_weak: usize, weak_steps: usize, p_powerful: usize, powerful_steps: usize) -> Result<Self, TrainError> {
        Self::new(vec![(p_weak, weak_steps), (p_powerful, powerful_steps)])
    }

    pub fn total(&self) -> usize {
        self.stages.iter().map(|s| s.1).sum()
    }

    pub fn final_size(&self) -> usize {
        self.stages.last().expect("validated").0
    }

    /// Stage interval lookup.
    pub fn size_at(&self, t_target: usize, t: usize) -> Option<usize> {
        let mut above = self.total();
        for &(p, s) in &self.stages {
            let hi = t_target + above;
            above -= s;
            let lo = t_target + above;
            if lo < t && t <= hi {
                return Some(p);
            }
        }
        None
    }

    /// `(t, p)` from `t_target + S` down to `t_target + 1`.
    pub fn chain(&self, t_target: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.total());
        let mut t = t_target + self.total();
        for &(p, s) in &self.stages {
            for _ in 0..s {
                out.push((t, p));
                t -= 1;
            }
        }
        out
    }

    /// `max(1, ceil((T - S) u^2))`: favours small targets while keeping the start within `T`.
    pub fn target_from_uniform(&self, steps: usize, u: f64) -> Result<usize, TrainError> {
        let room = steps.checked_sub(self.total()).filter(|&r| r >= 1).ok_or_else(|| {
            TrainError::Bootstrap(format!("chain of {} steps does not fit in T={steps}", self.total()))
        })?;
        Ok(((room as f64 * u * u).ceil() as usize).clamp(1, room))
    }
}

/// What one bootstrap evaluation drew and spent.
#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapDraw {
    pub t_target: usize,
    pub t_start: usize,
    pub visited: Vec<(usize, usize)>,
    /// Spent in the gradient-free part of the chain.
    pub flops: FlopCounter,
}

fn noise_like(rng: &mut SplitRng, x: &Tensor) -> Tensor {
    rng.normal_tensor(x.shape())
}

/// Run every chain step but the last without gradients. Returns the inputs of the final step.
fn run_prefix<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    mut xs: Vec<Tensor>,
    conds: &[Cond],
    steps: &[(usize, usize)],
    rng: &mut SplitRng,
    flops: &mut FlopCounter,
) -> Result<Vec<Tensor>, TrainError> {
    for &(t, p) in steps {
        let items: Vec<ForwardItem> =
            xs.iter().zip(conds).map(|(x, c)| ForwardItem { x: x.clone(), t, cond: c.clone(), p }).collect();
        let (outs, stats) = model.evaluate(&items, Packing::Strategy(2))?;
        flops.merge(&stats.flops);
        xs = xs
            .iter()
            .zip(&outs)
            .map(|(x, o)| {
                let z = noise_like(rng, x);
                p_sample_step(schedule, x, t, o, &z)
            })
            .collect::<Result<_, _>>()?;
    }
    Ok(xs)
}

fn draw_targets(
    schedule: &NoiseSchedule,
    sched: &BootstrapSchedule,
    x0: &[Tensor],
    x0_tilde: &[Tensor],
    rng: &mut SplitRng,
) -> Result<(usize, Vec<Tensor>, Vec<Tensor>), TrainError> {
    if x0.len() < 2 || x0_tilde.len() < 2 {
        return Err(TrainError::Mmd("bootstrap needs at least two samples per set".into()));
    }
    let t_target = sched.target_from_uniform(schedule.steps, rng.uniform())?;
    let t_start = t_target + sched.total();
    let targets = x0
        .iter()
        .map(|x| q_sample(schedule, x, t_target, &noise_like(rng, x)))
        .collect::<Result<Vec<_>, _>>()?;
    let starts = x0_tilde
        .iter()
        .map(|x| q_sample(schedule, x, t_start, &noise_like(rng, x)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((t_target, targets, starts))
}

fn flatten(xs: &[Tensor]) -> Result<Tensor, TrainError> {
    let d = xs[0].numel();
    Ok(Tensor::stack(xs)?.reshape(&[xs.len(), d])?)
}

/// Gradient-free chain: `(targets, predictions)` as `[B, D]` row sets.
pub fn bootstrap_chain<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    sched: &BootstrapSchedule,
    x0: &[Tensor],
    x0_tilde: &[Tensor],
    conds: &[Cond],
    rng: &mut SplitRng,
) -> Result<(Tensor, Tensor, BootstrapDraw), TrainError> {
    let (t_target, targets, starts) = draw_targets(schedule, sched, x0, x0_tilde, rng)?;
    let visited = sched.chain(t_target);
    let mut flops = FlopCounter::default();
    let preds = run_prefix(model, schedule, starts, conds, &visited, rng, &mut flops)?;
    let draw = BootstrapDraw { t_target, t_start: t_target + sched.total(), visited, flops };
    Ok((flatten(&targets)?, flatten(&preds)?, draw))
}

/// MMD between forward samples at `t_target` and chain end points. Only the
/// final chain step is on the tape.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_mmd_loss<'t>(
    b: &Binder<'t, '_>,
    schedule: &NoiseSchedule,
    sched: &BootstrapSchedule,
    x0: &[Tensor],
    x0_tilde: &[Tensor],
    conds: &[Cond],
    multipliers: &[f64],
    rng: &mut SplitRng,
) -> Result<(Var<'t>, BootstrapDraw), TrainError> {
    let params = b.params();
    if params.mode != FlexMode::Shared {
        return Err(TrainError::Bootstrap(format!("needs a shared-mode model, got {}", params.mode.name())));
    }
    let (t_target, targets, starts) = draw_targets(schedule, sched, x0, x0_tilde, rng)?;
    let visited = sched.chain(t_target);
    let mut flops = FlopCounter::default();
    let (&(t, p), prefix) = visited.split_last().expect("validated non-empty");
    let xs = run_prefix(params, schedule, starts, conds, prefix, rng, &mut flops)?;

    let tape = b.tape();
    let items: Vec<ForwardItem> =
        xs.iter().zip(conds).map(|(x, c)| ForwardItem { x: x.clone(), t, cond: c.clone(), p }).collect();
    let lens = vec![params.config.tokens(p); items.len()];
    let trace = forward_packed(b, &items, &ExecLayout::independent(&lens))?;

    let c = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / schedule.alpha(t).sqrt();
    let d = xs[0].numel();
    let mut rows = Vec::with_capacity(xs.len());
    for (x, out) in xs.iter().zip(&trace.outputs) {
        let full = out.value().numel();
        let flat = out.reshape(&[1, full])?;
        let eps = flat.slice_cols(0, d)?;
        let var_logits = (full > d).then(|| -> Result<Tensor, TrainError> {
            Ok(Tensor::new(x.shape(), flat.value().data()[d..].to_vec())?)
        });
        let var_logits = var_logits.transpose()?;
        let sigma = step_variance(schedule, t, var_logits.as_ref(), x.shape()).map(f64::sqrt);
        let z = noise_like(rng, x).mul(&sigma)?;
        let x_const = tape.constant(x.reshaped(&[1, d])?.scale(inv).add(&z.reshape(&[1, d])?)?);
        rows.push(x_const.sub(&eps.scale(inv * c)?)?);
    }
    let pred = Var::concat_rows(&rows)?;
    let target = flatten(&targets)?;
    let kernel = RbfMixture::median_heuristic(&target, &pred.value(), multipliers)?;
    let loss = mmd2_var(&pred, &tape.constant(target), &kernel)?;
    Ok((loss, BootstrapDraw { t_target, t_start: t_target + sched.total(), visited, flops }))
}
