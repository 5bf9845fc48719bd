use super::{ddim_step, p_sample_step, Denoiser, DiffusionError, NoiseSchedule};
use crate::backbone::{Cond, ModelOutput};
use crate::compute_model::Packing;
use crate::numerics::rng::branch;
use crate::numerics::{SplitRng, Tensor};
use crate::scheduler_guidance::{nfe_batch, InferencePlan, NfeStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    Ddpm,
    /// Deterministic, `eta = 0`.
    Ddim,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    pub sampler: Sampler,
    pub packing: Packing,
    /// Keep every `x_t` and combined prediction.
    pub record: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { sampler: Sampler::Ddpm, packing: Packing::Strategy(2), record: false }
    }
}

/// Called with `t` and the combined predictions before they are used.
pub type EpsHook<'a> = &'a mut dyn FnMut(usize, &mut [ModelOutput]);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryLog {
    /// `(t, p_cond, p_uncond)` per executed step.
    pub sizes: Vec<(usize, usize, usize)>,
    /// `xs[k][i]`: image `i` entering step `T - k`.
    pub xs: Vec<Vec<Tensor>>,
    pub eps: Vec<Vec<Tensor>>,
    pub stats: NfeStats,
}

/// Starting noise of one trajectory.
pub fn initial_noise(seed: u64, shape: &[usize]) -> Tensor {
    SplitRng::for_step(seed, 0, branch::INITIAL_NOISE).normal_tensor(shape)
}

/// Run the reverse chain for one image per `(cond, seed)` pair, batched across images.
pub fn sample_loop<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    plan: &InferencePlan,
    conds: &[Cond],
    seeds: &[u64],
    opts: &SampleOptions,
    mut hook: Option<EpsHook<'_>>,
) -> Result<(Vec<Tensor>, TrajectoryLog), DiffusionError> {
    if plan.steps != schedule.steps || plan.entries.len() != plan.steps || model.steps() != schedule.steps {
        return Err(DiffusionError::IncompletePlan(format!(
            "plan covers {} of {} steps (model trained for {})",
            plan.entries.len(),
            schedule.steps,
            model.steps()
        )));
    }
    if conds.len() != seeds.len() {
        return Err(DiffusionError::IncompletePlan(format!("{} conditions for {} seeds", conds.len(), seeds.len())));
    }
    let shape = model.image_shape();
    let mut xs: Vec<Tensor> = seeds.iter().map(|&s| initial_noise(s, &shape)).collect();
    let mut log = TrajectoryLog::default();
    for (k, e) in plan.entries.iter().enumerate() {
        let t = schedule.steps - k;
        if e.t != t {
            return Err(DiffusionError::IncompletePlan(format!("entry {k} is for t={}, expected {t}", e.t)));
        }
        let (mut outs, stats) = nfe_batch(model, &xs, t, conds, e, plan.guidance_config(), opts.packing)?;
        log.stats.merge(&stats);
        if let Some(h) = hook.as_mut() {
            h(t, &mut outs);
        }
        if opts.record {
            log.xs.push(xs.clone());
            log.eps.push(outs.iter().map(|o| o.eps.clone()).collect());
        }
        log.sizes.push((t, e.p_cond, e.p_uncond));
        for ((x, out), &seed) in xs.iter_mut().zip(&outs).zip(seeds) {
            *x = match opts.sampler {
                Sampler::Ddpm => {
                    let z = if t > 1 {
                        SplitRng::for_step(seed, t, branch::STEP_NOISE).normal_tensor(&shape)
                    } else {
                        Tensor::zeros(&shape)
                    };
                    p_sample_step(schedule, x, t, out, &z)?
                }
                Sampler::Ddim => ddim_step(schedule, x, t, &out.eps)?,
            };
        }
    }
    Ok((xs, log))
}
