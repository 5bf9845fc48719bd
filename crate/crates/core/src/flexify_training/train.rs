//! Training loops: pretraining, shared-mode fine-tuning and LoRA distillation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::bootstrap::{bootstrap_mmd_loss, BootstrapSchedule};
use super::mmd::MEDIAN_MULTIPLIERS;
use super::{distill_loss, TrainError};
use crate::backbone::{forward_packed, Binder, Cond, ExecLayout, FlexMode, ForwardItem, ModelParams};
use crate::data::Example;
use crate::diffusion::{eps_mse_loss, q_sample, NoiseSchedule};
use crate::numerics::optim::{AdamConfig, AdamState, Ema};
use crate::numerics::rng::TrackedRng;
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Epsilon loss at the pretrained patch size.
    Pretrain,
    /// Epsilon loss at a random supported size per batch, plus the bootstrap term.
    Shared,
    /// Match the frozen powerful prediction at a random weak size.
    Distill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub ema_rate: f64,
    pub class_dropout: f64,
    /// Sizes to draw from; empty means every size the objective can train.
    pub patch_sizes: Vec<usize>,
    pub distill_weight: f64,
    pub mmd_weight: f64,
    /// Apply the bootstrap term every this many steps.
    pub mmd_every: u64,
    pub mmd_batch: usize,
    pub bandwidth_multipliers: Vec<f64>,
    pub bootstrap_weak_steps: usize,
    pub bootstrap_powerful_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Pretrain,
            steps: 1000,
            batch: 16,
            seed: 0,
            lr: 8e-4,
            weight_decay: 1e-2,
            grad_clip: AdamConfig::default().grad_clip,
            ema_rate: 0.999,
            class_dropout: 0.1,
            patch_sizes: Vec::new(),
            distill_weight: 1.0,
            mmd_weight: 0.0,
            mmd_every: 4,
            mmd_batch: 16,
            bandwidth_multipliers: MEDIAN_MULTIPLIERS.to_vec(),
            bootstrap_weak_steps: 2,
            bootstrap_powerful_steps: 1,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, grad_clip: self.grad_clip, ..AdamConfig::default() }
    }

    fn sizes(&self, params: &ModelParams) -> Result<Vec<usize>, TrainError> {
        let p0 = params.config.p_powerful;
        let supported = params.supported();
        let allowed: Vec<usize> = match self.objective {
            Objective::Pretrain => vec![p0],
            Objective::Shared => supported,
            Objective::Distill => supported.into_iter().filter(|&p| p != p0).collect(),
        };
        let sizes = if self.patch_sizes.is_empty() { allowed.clone() } else { self.patch_sizes.clone() };
        if sizes.is_empty() || sizes.iter().any(|p| !allowed.contains(p)) {
            return Err(TrainError::Config(format!(
                "{:?} cannot train patch sizes {sizes:?} (allowed {allowed:?})",
                self.objective
            )));
        }
        Ok(sizes)
    }

    fn check(&self, params: &ModelParams) -> Result<(), TrainError> {
        let want = match self.objective {
            Objective::Pretrain => FlexMode::Base,
            Objective::Shared => FlexMode::Shared,
            Objective::Distill => FlexMode::Lora,
        };
        if params.mode != want {
            return Err(TrainError::Config(format!(
                "{:?} needs a {} model, got {}",
                self.objective,
                want.name(),
                params.mode.name()
            )));
        }
        if self.mmd_weight != 0.0 && self.objective != Objective::Shared {
            return Err(TrainError::Config("the bootstrap term is only defined for shared mode".into()));
        }
        if self.batch == 0 || !(0.0..=1.0).contains(&self.class_dropout) || !(0.0..=1.0).contains(&self.ema_rate) {
            return Err(TrainError::Config("batch must be positive; dropout and EMA rate in [0, 1]".into()));
        }
        if self.mmd_weight != 0.0 && (self.mmd_batch < 2 || self.mmd_every == 0) {
            return Err(TrainError::Config("bootstrap term needs mmd_batch >= 2 and mmd_every >= 1".into()));
        }
        self.sizes(params).map(|_| ())
    }
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub step: u64,
    pub p: usize,
    pub loss: f64,
    pub eps: f64,
    pub mmd: Option<f64>,
    pub distill: f64,
    pub grad_norm: f64,
    /// Cumulative training FLOPs.
    pub flops: u64,
    pub ema_checksum: f64,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} p={} loss={:.6e} eps={:.6e} mmd={} distill={:.6e} grad_norm={:.4e} flops={} ema={:.12e}",
            self.step,
            self.p,
            self.loss,
            self.eps,
            self.mmd.map_or("-".to_string(), |m| format!("{m:.6e}")),
            self.distill,
            self.grad_norm,
            self.flops,
            self.ema_checksum
        )
    }
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "step,p,loss,eps,mmd,distill,grad_norm,flops,ema";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{:e},{:e},{},{:e},{:e},{},{:e}",
            self.step,
            self.p,
            self.loss,
            self.eps,
            self.mmd.map_or(String::new(), |m| format!("{m:e}")),
            self.distill,
            self.grad_norm,
            self.flops,
            self.ema_checksum
        )
    }
}

/// Distillation loss of `items` (at weak sizes) against the same inputs at the
/// powerful size. The teacher runs gradient-free; its FLOPs are returned.
pub fn distill_objective<'t>(
    b: &Binder<'t, '_>,
    items: &[ForwardItem],
    layout: &ExecLayout,
) -> Result<(Var<'t>, u64), TrainError> {
    let params = b.params();
    let p0 = params.config.p_powerful;
    let teacher_items: Vec<ForwardItem> = items.iter().map(|it| ForwardItem { p: p0, ..it.clone() }).collect();
    let tl = vec![params.config.tokens(p0); items.len()];
    let (outs, tf) = params.predict_batch(&teacher_items, &ExecLayout::independent(&tl))?;
    let teacher: Vec<Tensor> = outs.into_iter().map(|o| o.eps).collect();
    let trace = forward_packed(b, items, layout)?;
    let n = teacher[0].numel();
    let student = trace
        .outputs
        .iter()
        .map(|o| o.reshape(&[1, o.value().numel()])?.slice_cols(0, n))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((distill_loss(b.tape(), &teacher, &student)?, tf.model_total()))
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: ModelParams,
    pub adam: AdamState,
    pub ema: Ema,
    pub rng: TrackedRng,
    pub step: u64,
    /// Cumulative training FLOPs: three times the forward cost of every
    /// differentiated pass plus the forward cost of every gradient-free pass.
    pub flops: u64,
    frozen_sums: BTreeMap<String, f64>,
}

fn trainable_map(params: &ModelParams) -> BTreeMap<String, Tensor> {
    params.tensors.iter().filter(|(n, _)| params.is_trainable(n)).map(|(n, t)| (n.clone(), t.clone())).collect()
}

fn frozen_sums(params: &ModelParams) -> BTreeMap<String, f64> {
    params.frozen.iter().filter_map(|n| params.tensors.get(n).map(|t| (n.clone(), t.data().iter().sum()))).collect()
}

impl Trainer {
    pub fn new(params: ModelParams, cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.check(&params)?;
        let ema = Ema::new(cfg.ema_rate, &trainable_map(&params));
        let frozen_sums = frozen_sums(&params);
        Ok(Self { params, adam: AdamState::default(), ema, rng: TrackedRng::new(cfg.seed), step: 0, flops: 0, frozen_sums })
    }

    /// Rebuild from checkpointed parts.
    pub fn resume(
        params: ModelParams,
        adam: AdamState,
        ema: Ema,
        rng: TrackedRng,
        step: u64,
        flops: u64,
    ) -> Self {
        let frozen_sums = frozen_sums(&params);
        Self { params, adam, ema, rng, step, flops, frozen_sums }
    }

    /// The trained model with EMA weights in place of the live trainable weights.
    pub fn ema_params(&self) -> ModelParams {
        let mut p = self.params.clone();
        for (n, t) in &self.ema.shadow {
            p.tensors.insert(n.clone(), t.clone());
        }
        p
    }

    fn draw_batch(&mut self, data: &[Example], n: usize, dropout: f64) -> (Vec<Tensor>, Vec<Cond>) {
        let rng = self.rng.rng();
        (0..n)
            .map(|_| {
                let e = &data[rng.below(data.len())];
                let cond = if rng.uniform() < dropout { Cond::Null } else { Cond::Class(e.label) };
                (e.x.clone(), cond)
            })
            .unzip()
    }

    /// One optimizer step.
    pub fn train_step(&mut self, data: &[Example], cfg: &TrainConfig) -> Result<Metrics, TrainError> {
        if data.is_empty() {
            return Err(TrainError::NoData);
        }
        let schedule = NoiseSchedule::linear(self.params.config.steps)?;
        let sizes = cfg.sizes(&self.params)?;
        let p = sizes[self.rng.rng().below(sizes.len())];
        let (x0, conds) = self.draw_batch(data, cfg.batch, cfg.class_dropout);
        let mut items = Vec::with_capacity(x0.len());
        let mut noises = Vec::with_capacity(x0.len());
        for (x, c) in x0.iter().zip(&conds) {
            let rng = self.rng.rng();
            let t = 1 + rng.below(schedule.steps);
            let noise = rng.normal_tensor(x.shape());
            items.push(ForwardItem { x: q_sample(&schedule, x, t, &noise)?, t, cond: c.clone(), p });
            noises.push(noise);
        }
        let lens = vec![self.params.config.tokens(p); items.len()];
        let layout = ExecLayout::independent(&lens);

        let due = cfg.objective == Objective::Shared && cfg.mmd_weight != 0.0 && (self.step + 1) % cfg.mmd_every == 0;
        let mmd_sets = if due {
            let (xa, _) = self.draw_batch(data, cfg.mmd_batch, 0.0);
            let (xb, cb) = self.draw_batch(data, cfg.mmd_batch, cfg.class_dropout);
            Some((xa, xb, cb))
        } else {
            None
        };

        let tape = Tape::new();
        let b = Binder::trainable(&tape, &self.params);
        let (mut eps, mut mmd, mut distill) = (0.0, None, 0.0);
        let mut free_flops = 0u64;
        let loss = match cfg.objective {
            Objective::Pretrain | Objective::Shared => {
                let l = eps_mse_loss(&b, &items, &noises, &layout)?;
                eps = l.value().item();
                if let Some((xa, xb, cb)) = &mmd_sets {
                    let sched = BootstrapSchedule::weak_then_powerful(
                        *self.params.supported().iter().max().expect("non-empty"),
                        cfg.bootstrap_weak_steps,
                        self.params.config.p_powerful,
                        cfg.bootstrap_powerful_steps,
                    )?;
                    let (m, draw) = bootstrap_mmd_loss(
                        &b,
                        &schedule,
                        &sched,
                        xa,
                        xb,
                        cb,
                        &cfg.bandwidth_multipliers,
                        self.rng.rng(),
                    )?;
                    free_flops += draw.flops.model_total();
                    mmd = Some(m.value().item());
                    l.add(&m.scale(cfg.mmd_weight)?)?
                } else {
                    l
                }
            }
            Objective::Distill => {
                let (l, tf) = distill_objective(&b, &items, &layout)?;
                free_flops += tf;
                distill = l.value().item();
                l.scale(cfg.distill_weight)?
            }
        };
        let grad_flops = tape.flops().model_total();
        let grads = tape.backward(loss)?;
        let mut gmap = BTreeMap::new();
        for (name, v) in b.bound() {
            if v.requires_grad() {
                gmap.insert(name, grads.get_or_zero(v));
            }
        }
        drop(b);
        let loss_value = loss.value().item();
        let grad_norm = self.adam.update(&mut self.params.tensors, &gmap, &cfg.adam())?;
        self.ema.update(&trainable_map(&self.params));
        self.step += 1;
        self.flops += 3 * grad_flops + free_flops;
        self.check_frozen()?;
        Ok(Metrics {
            step: self.step,
            p,
            loss: loss_value,
            eps,
            mmd,
            distill,
            grad_norm,
            flops: self.flops,
            ema_checksum: self.ema.checksum(),
        })
    }

    fn check_frozen(&self) -> Result<(), TrainError> {
        for (name, sum) in &self.frozen_sums {
            let now: f64 = self.params.tensors.get(name).map_or(f64::NAN, |t| t.data().iter().sum());
            if now.to_bits() != sum.to_bits() {
                return Err(TrainError::FrozenMutated(name.clone()));
            }
        }
        Ok(())
    }

    /// Run until `cfg.steps`, passing every metrics line to `log`.
    pub fn run(
        &mut self,
        data: &[Example],
        cfg: &TrainConfig,
        mut log: impl FnMut(&Metrics),
    ) -> Result<Vec<Metrics>, TrainError> {
        let mut out = Vec::new();
        while self.step < cfg.steps {
            let m = self.train_step(data, cfg)?;
            log(&m);
            out.push(m);
        }
        Ok(out)
    }
}
