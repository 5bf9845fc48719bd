//! FLOPs accounting, plan compute fractions and CFG packing layouts.
//!
//! Convention: a multiply-add is two FLOPs, so an `N x d_in -> d_out` linear
//! map costs `2 N d_in d_out`. Only matrix products and attention are counted.

mod packing;

use crate::backbone::{Conditioning, ExecLayout, FlexMode, ModelConfig, ModelParams};
use crate::numerics::{FlopCounter, FlopKind};
use crate::scheduler_guidance::InferencePlan;

pub use packing::{pack, pack_items, LatencyModel, PackingStrategy, Packing};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ComputeError {
    #[error("strategy {0} does not exist (expected 1..=4)")]
    UnknownStrategy(u8),
    #[error("strategy 4 needs at least {ratio} sequences of length {len}, got {count}")]
    Infeasible { len: usize, count: usize, ratio: usize },
    #[error("empty request")]
    Empty,
}

/// Cost of one transformer block over `n` tokens.
pub fn block_flops(n: u64, d: u64, hidden: u64) -> u64 {
    8 * n * d * d + 4 * n * n * d + 4 * n * d * hidden
}

/// Adapter overhead of one block: six adapted layers at rank `r`.
pub fn lora_block_flops(n: u64, d: u64, hidden: u64, r: u64) -> u64 {
    let layer = |d_in: u64, d_out: u64| 2 * n * (d_in * r + r * d_out);
    4 * layer(d, d) + layer(d, hidden) + layer(hidden, d)
}

/// Geometry of one sequence through the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepGeometry {
    pub n: usize,
    pub d: usize,
    pub depth: usize,
    pub hidden: usize,
    /// `c_in p^2`
    pub patch_in: usize,
    /// `c_out p^2`
    pub patch_out: usize,
    /// Timestep feature width; 0 leaves conditioning out.
    pub freq_dim: usize,
    /// Context tokens for cross-attention, 0 for class conditioning.
    pub ctx_len: usize,
    pub d_lora: Option<usize>,
    pub merged: bool,
}

impl StepGeometry {
    /// Bare transformer stack: blocks plus adapters, nothing else.
    pub fn transformer(n: usize, d: usize, depth: usize) -> Self {
        Self { n, d, depth, hidden: 4 * d, patch_in: 0, patch_out: 0, freq_dim: 0, ctx_len: 0, d_lora: None, merged: false }
    }

    pub fn from_config(cfg: &ModelConfig, p: usize) -> Self {
        Self {
            n: cfg.tokens(p),
            d: cfg.d,
            depth: cfg.depth,
            hidden: cfg.hidden(),
            patch_in: cfg.c_in * p * p,
            patch_out: cfg.c_out * p * p,
            freq_dim: cfg.freq_dim,
            ctx_len: 0,
            d_lora: None,
            merged: false,
        }
    }

    /// Geometry of `params` at patch size `p`, with adapters when registered and unmerged.
    pub fn from_params(params: &ModelParams, p: usize, ctx_len: usize) -> Self {
        let cfg = &params.config;
        let mut g = Self::from_config(cfg, p);
        g.ctx_len = if cfg.conditioning == Conditioning::Cross { ctx_len } else { 0 };
        if params.mode == FlexMode::Lora && p != cfg.p_powerful {
            g.d_lora = Some(cfg.d_lora);
            g.merged = params.merged_for == Some(p);
        }
        g
    }

    fn cross(&self) -> bool {
        self.ctx_len > 0
    }
}

/// Per-component FLOPs of one denoiser evaluation.
pub fn flops_per_step(g: &StepGeometry) -> FlopCounter {
    let (n, d, l, h) = (g.n as u64, g.d as u64, g.depth as u64, g.hidden as u64);
    let mut c = FlopCounter::default();
    c.add(FlopKind::Embed, 2 * n * g.patch_in as u64 * d);
    c.add(FlopKind::AttnLinear, l * 8 * n * d * d);
    c.add(FlopKind::AttnMatmul, l * 4 * n * n * d);
    c.add(FlopKind::Mlp, l * 4 * n * d * h);
    c.add(FlopKind::Deembed, 2 * n * d * g.patch_out as u64);
    if let (Some(r), false) = (g.d_lora, g.merged) {
        c.add(FlopKind::Lora, l * lora_block_flops(n, d, h, r as u64));
    }
    if g.freq_dim > 0 {
        c.add(FlopKind::Conditioning, conditioning_flops(1, g.freq_dim as u64, d, l));
    }
    if g.cross() {
        let m = g.ctx_len as u64;
        c.add(FlopKind::CrossAttn, l * (4 * n * d * d + 4 * m * d * d + 4 * n * m * d));
    }
    c
}

fn conditioning_flops(items: u64, f: u64, d: u64, l: u64) -> u64 {
    items * (2 * f * d + 2 * d * d + l * 12 * d * d + 4 * d * d)
}

/// Work of one item in a packed launch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemCost {
    pub p: usize,
    pub d_lora: Option<usize>,
    pub ctx_len: usize,
}

impl ItemCost {
    pub fn of(params: &ModelParams, p: usize, ctx_len: usize) -> Self {
        let g = StepGeometry::from_params(params, p, ctx_len);
        Self { p, d_lora: if g.merged { None } else { g.d_lora }, ctx_len: g.ctx_len }
    }
}

/// FLOPs the packed forward spends on `items` arranged by `layout`.
pub fn layout_flops(cfg: &ModelConfig, items: &[ItemCost], layout: &ExecLayout) -> FlopCounter {
    let (d, l, h) = (cfg.d as u64, cfg.depth as u64, cfg.hidden() as u64);
    let lens: Vec<u64> = items.iter().map(|it| cfg.tokens(it.p) as u64).collect();
    let mut c = FlopCounter::default();
    let mut stream = 0u64;
    let mut attn = 0u64;
    let mut ctx_tokens = 0u64;
    let mut cross_pairs = 0u64;
    for row in &layout.rows {
        let used: u64 = row.items.iter().map(|&i| lens[i]).sum();
        let pad = row.len as u64 - used;
        let mut seg_sq: u64 = row.items.iter().map(|&i| lens[i] * lens[i]).sum();
        stream += used;
        for &i in &row.items {
            ctx_tokens += items[i].ctx_len as u64;
            cross_pairs += lens[i] * items[i].ctx_len as u64;
        }
        if pad > 0 && layout.pad_linears {
            stream += pad;
            seg_sq += pad * pad;
            if cfg.conditioning == Conditioning::Cross {
                ctx_tokens += 1;
                cross_pairs += pad;
            }
        }
        attn += if layout.dense_attention { (row.len * row.len) as u64 } else { seg_sq };
    }
    for (it, &n) in items.iter().zip(&lens) {
        let p2 = (it.p * it.p) as u64;
        c.add(FlopKind::Embed, 2 * n * cfg.c_in as u64 * p2 * d);
        c.add(FlopKind::Deembed, 2 * n * d * cfg.c_out as u64 * p2);
        if let Some(r) = it.d_lora {
            c.add(FlopKind::Lora, l * lora_block_flops(n, d, h, r as u64));
        }
    }
    c.add(FlopKind::AttnLinear, l * 8 * stream * d * d);
    c.add(FlopKind::AttnMatmul, l * 4 * attn * d);
    c.add(FlopKind::Mlp, l * 4 * stream * d * h);
    c.add(FlopKind::Conditioning, conditioning_flops(items.len() as u64, cfg.freq_dim as u64, d, l));
    if cfg.conditioning == Conditioning::Cross {
        c.add(FlopKind::CrossAttn, l * (4 * stream * d * d + 4 * ctx_tokens * d * d + 4 * cross_pairs * d));
    }
    c
}

/// Compute of a plan against the all-powerful plan with the same guidance.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    /// Per step `t = T..1`: FLOPs of all branches.
    pub per_step: Vec<u64>,
    pub total: u64,
    pub baseline: u64,
    pub compute_fraction: f64,
    /// Components summed over the plan; empty for scalar cost models.
    pub components: FlopCounter,
}

impl FlopsReport {
    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "total_flops={}\nbaseline_flops={}\ncompute_fraction={:.6}\n",
            self.total, self.baseline, self.compute_fraction
        );
        for k in FlopKind::ALL {
            let v = self.components.get(k);
            if v > 0 {
                s.push_str(&format!("flops.{}={v}\n", k.name()));
            }
        }
        s
    }
}

/// Plan compute under an arbitrary per-evaluation cost.
pub fn plan_flops_with(plan: &InferencePlan, cost: impl Fn(usize) -> FlopCounter) -> FlopsReport {
    let guided = plan.is_guided();
    let mut components = FlopCounter::default();
    let mut per_step = Vec::with_capacity(plan.entries.len());
    for e in &plan.entries {
        let mut step = cost(e.p_cond);
        if guided {
            step.merge(&cost(e.p_uncond));
        }
        per_step.push(step.model_total());
        components.merge(&step);
    }
    let total: u64 = per_step.iter().sum();
    let branches = if guided { 2 } else { 1 };
    let baseline = branches * plan.steps as u64 * cost(plan.p_powerful).model_total();
    FlopsReport { per_step, total, baseline, compute_fraction: total as f64 / baseline as f64, components }
}

/// Plan compute for a model, one item per branch.
pub fn plan_flops(plan: &InferencePlan, params: &ModelParams, ctx_len: usize) -> FlopsReport {
    plan_flops_with(plan, |p| flops_per_step(&StepGeometry::from_params(params, p, ctx_len)))
}

/// Cost proportional to token count: the MLP-only regime where `p -> 2p` costs a quarter.
pub fn token_linear_cost(cfg: &ModelConfig) -> impl Fn(usize) -> FlopCounter + '_ {
    move |p| {
        let mut c = FlopCounter::default();
        c.add(FlopKind::Mlp, cfg.tokens(p) as u64);
        c
    }
}
