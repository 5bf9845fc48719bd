//! Diagnostics: spectral filtering of one step, weak/powerful divergence,
//! activation drift along a trajectory, and image similarity metrics.

mod filter;
mod metrics;

pub use filter::{BandFilter, FilterKind};
pub use metrics::{diversity, l2, spearman, ssim, ssim_parts, Diversity, SsimParts};

use crate::backbone::{BackboneError, Cond, ForwardItem, ModelParams};
use crate::compute_model::Packing;
use crate::diffusion::{q_sample, sample_loop, Denoiser, DiffusionError, NoiseSchedule, SampleOptions};
use crate::numerics::{NumericsError, SplitRng, Tensor};
use crate::scheduler_guidance::InferencePlan;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("step {t} outside [1, {steps}]")]
    BadStep { t: usize, steps: usize },
    #[error("unknown activation tap {tap} (model has {depth} blocks)")]
    UnknownTap { tap: usize, depth: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid filter: {0}")]
    Filter(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Final images of a run whose prediction at step `step` went through `filter`.
#[allow(clippy::too_many_arguments)]
pub fn generate_with_filter<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    plan: &InferencePlan,
    conds: &[Cond],
    seeds: &[u64],
    step: usize,
    filter: &BandFilter,
    opts: &SampleOptions,
) -> Result<Vec<Tensor>, AnalysisError> {
    if step == 0 || step > schedule.steps {
        return Err(AnalysisError::BadStep { t: step, steps: schedule.steps });
    }
    let mut err = None;
    let mut hook = |t: usize, outs: &mut [crate::backbone::ModelOutput]| {
        if t != step {
            return;
        }
        for o in outs.iter_mut() {
            match filter.apply(&o.eps) {
                Ok(f) => o.eps = f,
                Err(e) => err = Some(e),
            }
        }
    };
    let (xs, _) = sample_loop(model, schedule, plan, conds, seeds, opts, Some(&mut hook))?;
    match err {
        Some(e) => Err(e),
        None => Ok(xs),
    }
}

/// Per-seed comparison of a filtered run against the unfiltered run.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterReport {
    pub step: usize,
    pub filter: BandFilter,
    pub images: Vec<Tensor>,
    pub baseline: Vec<Tensor>,
    pub l2: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl FilterReport {
    pub fn mean_l2(&self) -> f64 {
        self.l2.iter().sum::<f64>() / self.l2.len().max(1) as f64
    }
}

/// Run with and without filtering the prediction of one step; all noise is shared.
#[allow(clippy::too_many_arguments)]
pub fn filtered_step_generate<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    plan: &InferencePlan,
    conds: &[Cond],
    seeds: &[u64],
    step: usize,
    filter: &BandFilter,
    baseline: Option<&[Tensor]>,
    opts: &SampleOptions,
) -> Result<FilterReport, AnalysisError> {
    let images = generate_with_filter(model, schedule, plan, conds, seeds, step, filter, opts)?;
    let baseline = match baseline {
        Some(b) => b.to_vec(),
        None => generate_with_filter(model, schedule, plan, conds, seeds, step, &BandFilter::all(), opts)?,
    };
    if baseline.len() != images.len() {
        return Err(AnalysisError::Shape(format!("{} baseline images for {} runs", baseline.len(), images.len())));
    }
    let l2s = images.iter().zip(&baseline).map(|(a, b)| l2(a, b)).collect::<Result<_, _>>()?;
    let ssims = images.iter().zip(&baseline).map(|(a, b)| ssim(a, b)).collect::<Result<_, _>>()?;
    Ok(FilterReport { step, filter: *filter, images, baseline, l2: l2s, ssim: ssims })
}

/// Mean `|eps(p_weak) - eps(p_powerful)|_2` per probed timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceCurve {
    pub ts: Vec<usize>,
    pub mean_l2: Vec<f64>,
    pub samples: usize,
}

impl DivergenceCurve {
    pub fn spearman(&self) -> f64 {
        let t: Vec<f64> = self.ts.iter().map(|&t| t as f64).collect();
        spearman(&t, &self.mean_l2)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,mean_l2\n");
        for (t, v) in self.ts.iter().zip(&self.mean_l2) {
            s.push_str(&format!("{t},{v:e}\n"));
        }
        s
    }
}

/// Noise each probe to every `t` (noise drawn from `(seed, t)` streams) and
/// compare the two patch sizes on identical inputs.
#[allow(clippy::too_many_arguments)]
pub fn divergence_curve<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    probes: &[Tensor],
    conds: &[Cond],
    ts: &[usize],
    p_weak: usize,
    p_powerful: usize,
    seed: u64,
) -> Result<DivergenceCurve, AnalysisError> {
    if probes.len() != conds.len() || probes.is_empty() {
        return Err(AnalysisError::Shape(format!("{} probes with {} conditions", probes.len(), conds.len())));
    }
    let mut mean_l2 = Vec::with_capacity(ts.len());
    for &t in ts {
        if t == 0 || t > schedule.steps {
            return Err(AnalysisError::BadStep { t, steps: schedule.steps });
        }
        let mut rng = SplitRng::stream(seed, t as u64);
        let xs = probes
            .iter()
            .map(|x0| q_sample(schedule, x0, t, &rng.normal_tensor(x0.shape())))
            .collect::<Result<Vec<_>, _>>()?;
        let mut items = Vec::with_capacity(2 * xs.len());
        for p in [p_weak, p_powerful] {
            items.extend(xs.iter().zip(conds).map(|(x, c)| ForwardItem { x: x.clone(), t, cond: c.clone(), p }));
        }
        let (outs, _) = model.evaluate(&items, Packing::Strategy(2))?;
        let n = xs.len();
        let mut acc = 0.0;
        for i in 0..n {
            acc += l2(&outs[i].eps, &outs[n + i].eps)?;
        }
        mean_l2.push(acc / n as f64);
    }
    Ok(DivergenceCurve { ts: ts.to_vec(), mean_l2, samples: probes.len() })
}

/// Block activations at every executed step of one trajectory: `trace[k][j]`
/// is tap `j` while denoising `x_{T-k}`. The conditional branch's patch size is used.
pub fn activation_trace(
    model: &ModelParams,
    schedule: &NoiseSchedule,
    plan: &InferencePlan,
    cond: &Cond,
    seed: u64,
    taps: &[usize],
) -> Result<Vec<Vec<Tensor>>, AnalysisError> {
    for &tap in taps {
        if tap >= model.config.depth {
            return Err(AnalysisError::UnknownTap { tap, depth: model.config.depth });
        }
    }
    let opts = SampleOptions { record: true, ..SampleOptions::default() };
    let (_, log) = sample_loop(model, schedule, plan, std::slice::from_ref(cond), &[seed], &opts, None)?;
    let mut out = Vec::with_capacity(log.xs.len());
    for (xs, &(t, p, _)) in log.xs.iter().zip(&log.sizes) {
        let acts = model.activations(&xs[0], t, cond, p)?;
        out.push(taps.iter().map(|&j| acts[j].clone()).collect());
    }
    Ok(out)
}

/// `[taps x (steps - 1)]` distances between successive steps. Steps whose
/// token counts differ (a patch-size switch) give NaN.
pub fn activation_distance(trace: &[Vec<Tensor>]) -> Vec<Vec<f64>> {
    let taps = trace.first().map_or(0, Vec::len);
    (0..taps)
        .map(|j| {
            trace
                .windows(2)
                .map(|w| l2(&w[0][j], &w[1][j]).unwrap_or(f64::NAN))
                .collect()
        })
        .collect()
}

pub fn matrix_csv(rows: &[Vec<f64>], labels: &[String]) -> String {
    let mut s = String::new();
    for (label, row) in labels.iter().zip(rows) {
        s.push_str(label);
        for v in row {
            s.push_str(&format!(",{v:e}"));
        }
        s.push('\n');
    }
    s
}
