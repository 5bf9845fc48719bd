use std::collections::BTreeMap;

use super::{cfg_combine, GuidanceConfig, PlanEntry, SchedulerError};
use crate::backbone::{Cond, ForwardItem, ModelOutput};
use crate::compute_model::Packing;
use crate::diffusion::Denoiser;
use crate::numerics::{FlopCounter, Tensor};

/// Forward passes per patch size, launch count and FLOPs spent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NfeStats {
    pub forwards: BTreeMap<usize, usize>,
    pub launches: usize,
    pub flops: FlopCounter,
}

impl NfeStats {
    pub fn merge(&mut self, other: &NfeStats) {
        for (p, n) in &other.forwards {
            *self.forwards.entry(*p).or_default() += n;
        }
        self.launches += other.launches;
        self.flops.merge(&other.flops);
    }

    pub fn total_forwards(&self) -> usize {
        self.forwards.values().sum()
    }
}

/// Evaluate one plan step for a batch of images, guided if `guidance` is set.
///
/// The guidance branch drops the conditioning when both branches share a
/// patch size and keeps it otherwise. Learned variances come from the
/// conditional branch.
pub fn nfe_batch<D: Denoiser + ?Sized>(
    model: &D,
    xs: &[Tensor],
    t: usize,
    conds: &[Cond],
    entry: &PlanEntry,
    guidance: Option<&GuidanceConfig>,
    packing: Packing,
) -> Result<(Vec<ModelOutput>, NfeStats), SchedulerError> {
    if guidance.is_some() && entry.p_cond > entry.p_uncond {
        return Err(SchedulerError::WeakerConditional { p_cond: entry.p_cond, p_uncond: entry.p_uncond });
    }
    let b = xs.len();
    let mut items: Vec<ForwardItem> =
        xs.iter().zip(conds).map(|(x, c)| ForwardItem { x: x.clone(), t, cond: c.clone(), p: entry.p_cond }).collect();
    if guidance.is_some() {
        for (x, c) in xs.iter().zip(conds) {
            let cond = if entry.p_cond == entry.p_uncond { Cond::Null } else { c.clone() };
            items.push(ForwardItem { x: x.clone(), t, cond, p: entry.p_uncond });
        }
    }
    let (mut outs, stats) = model.evaluate(&items, packing)?;
    let Some(cfg) = guidance else {
        return Ok((outs, stats));
    };
    let guides = outs.split_off(b);
    let combined = outs
        .into_iter()
        .zip(guides)
        .map(|(c, g)| {
            let eps = cfg_combine(&c.eps, &g.eps, cfg, entry.p_cond, entry.p_uncond)?;
            Ok(ModelOutput { eps, var_logits: c.var_logits })
        })
        .collect::<Result<Vec<_>, SchedulerError>>()?;
    Ok((combined, stats))
}

/// Single-image form of [`nfe_batch`].
pub fn nfe_pair<D: Denoiser + ?Sized>(
    model: &D,
    x: &Tensor,
    t: usize,
    cond: &Cond,
    entry: &PlanEntry,
    guidance: Option<&GuidanceConfig>,
    packing: Packing,
) -> Result<(ModelOutput, NfeStats), SchedulerError> {
    let (mut outs, stats) =
        nfe_batch(model, std::slice::from_ref(x), t, std::slice::from_ref(cond), entry, guidance, packing)?;
    Ok((outs.remove(0), stats))
}
