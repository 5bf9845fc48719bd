//! Packed forward pass.
//!
//! Items of different patch sizes share one token stream `[S, d]`. Token-wise
//! layers run once over the whole stream; per-size parameters (norms, adapters,
//! embeddings) are gathered by group, and attention is confined to each item's
//! segment by a block-diagonal mask.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::params::names;
use super::{BackboneError, Conditioning, FlexMode, ModelParams, PosMode};
use crate::numerics::{FlopCounter, FlopKind, SegmentMask, Tape, Tensor, Var};
use crate::tokenizer::{grid_resize, patchify, positional_encoding, unpatchify_indices, ImageGrid};

/// Conditioning signal of one item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Cond {
    Class(usize),
    /// Dropped conditioning, for the unconditional guidance branch.
    Null,
    Tokens(Vec<usize>),
}

/// One denoiser evaluation request.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardItem {
    /// `[c_in, h, w]`
    pub x: Tensor,
    pub t: usize,
    pub cond: Cond,
    pub p: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub eps: Tensor,
    pub var_logits: Option<Tensor>,
}

/// One batch row of a packed launch: whole items back to back, then padding up to `len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecRow {
    pub items: Vec<usize>,
    pub len: usize,
}

/// How items are arranged into rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecLayout {
    pub rows: Vec<ExecRow>,
    /// Padding tokens are materialized and pass through every token-wise layer.
    pub pad_linears: bool,
    /// Attention is charged for the full `len x len` extent of each row.
    pub dense_attention: bool,
}

impl ExecLayout {
    /// Each item in its own unpadded row.
    pub fn independent(lens: &[usize]) -> Self {
        let rows = lens.iter().enumerate().map(|(i, &n)| ExecRow { items: vec![i], len: n }).collect();
        Self { rows, pad_linears: false, dense_attention: false }
    }

    pub fn validate(&self, lens: &[usize]) -> Result<(), BackboneError> {
        let mut seen = vec![false; lens.len()];
        for row in &self.rows {
            let used: usize = row.items.iter().map(|&i| lens.get(i).copied().unwrap_or(0)).sum();
            for &i in &row.items {
                if i >= lens.len() || seen[i] {
                    return Err(BackboneError::Layout(format!("item {i} missing or placed twice")));
                }
                seen[i] = true;
            }
            if used > row.len {
                return Err(BackboneError::Layout(format!("row of length {} holds {used} tokens", row.len)));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(BackboneError::Layout(format!("item {i} not placed")));
        }
        Ok(())
    }
}

/// Binds named parameters onto a tape on first use.
pub struct Binder<'t, 'p> {
    tape: &'t Tape,
    params: &'p ModelParams,
    track: Box<dyn Fn(&str) -> bool + 'p>,
    overrides: BTreeMap<String, Var<'t>>,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t, 'p> Binder<'t, 'p> {
    /// Parameters selected by `track` require gradients.
    pub fn new(tape: &'t Tape, params: &'p ModelParams, track: impl Fn(&str) -> bool + 'p) -> Self {
        Self { tape, params, track: Box::new(track), overrides: BTreeMap::new(), bound: RefCell::new(BTreeMap::new()) }
    }

    /// Every parameter constant.
    pub fn frozen(tape: &'t Tape, params: &'p ModelParams) -> Self {
        Self::new(tape, params, |_| false)
    }

    /// Trainable parameters of `params` require gradients.
    pub fn trainable(tape: &'t Tape, params: &'p ModelParams) -> Self {
        Self::new(tape, params, move |n| params.is_trainable(n))
    }

    /// Use `var` in place of the stored tensor `name`.
    pub fn with_override(mut self, name: &str, var: Var<'t>) -> Self {
        self.overrides.insert(name.to_string(), var);
        self
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>, BackboneError> {
        if let Some(v) = self.overrides.get(name) {
            return Ok(*v);
        }
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.params.get(name)?.clone();
        let v = self.tape.leaf(t, (self.track)(name));
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has(&self, name: &str) -> bool {
        self.overrides.contains_key(name) || self.params.has(name)
    }

    /// Every parameter bound so far.
    pub fn bound(&self) -> BTreeMap<String, Var<'t>> {
        let mut out = self.bound.borrow().clone();
        out.extend(self.overrides.iter().map(|(k, v)| (k.clone(), *v)));
        out
    }
}

/// Per-item outputs plus the token stream after every block.
pub struct ForwardTrace<'t> {
    /// `[S, d]` stream entering the first block.
    pub embedded: Var<'t>,
    /// Per-item `silu(conditioning)`, `[B, d]`.
    pub cond: Var<'t>,
    /// `[c_out, h, w]` per item.
    pub outputs: Vec<Var<'t>>,
    /// `[S, d]` after each block.
    pub blocks: Vec<Var<'t>>,
    /// Stream offset of each item's first token.
    pub item_start: Vec<usize>,
    pub item_len: Vec<usize>,
}

/// Sinusoidal timestep features `[cos(t w_k), sin(t w_k)]`.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let w = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        out[k] = (t as f64 * w).cos();
        out[half + k] = (t as f64 * w).sin();
    }
    out
}

struct Stream {
    /// Group of each token (index into `sizes`, or `sizes.len()` for padding).
    group: Vec<usize>,
    owner: Vec<usize>,
    segments: Vec<usize>,
    /// Per group: stream positions in item order.
    group_pos: Vec<Rc<Vec<usize>>>,
    sizes: Vec<usize>,
    uniform: Option<usize>,
    pad_count: usize,
    dense_extra: u64,
    item_start: Vec<usize>,
}

impl Stream {
    fn build(items: &[ForwardItem], lens: &[usize], layout: &ExecLayout, d: usize) -> Stream {
        let mut sizes: Vec<usize> = items.iter().map(|it| it.p).collect();
        sizes.sort_unstable();
        sizes.dedup();
        let gidx = |p: usize| sizes.iter().position(|&s| s == p).expect("size registered");
        let mut group = Vec::new();
        let mut owner = Vec::new();
        let mut segments = Vec::new();
        let mut item_start = vec![0; items.len()];
        let mut pad_count = 0;
        let mut dense_extra = 0u64;
        for row in &layout.rows {
            let mut seg_sq = 0u64;
            for &i in &row.items {
                item_start[i] = group.len();
                let g = gidx(items[i].p);
                group.extend(std::iter::repeat_n(g, lens[i]));
                owner.extend(std::iter::repeat_n(i, lens[i]));
                segments.push(lens[i]);
                seg_sq += (lens[i] * lens[i]) as u64;
            }
            let pad = row.len - row.items.iter().map(|&i| lens[i]).sum::<usize>();
            if pad > 0 && layout.pad_linears {
                group.extend(std::iter::repeat_n(sizes.len(), pad));
                owner.extend(std::iter::repeat_n(row.items.first().copied().unwrap_or(0), pad));
                segments.push(pad);
                seg_sq += (pad * pad) as u64;
                pad_count += pad;
            }
            if layout.dense_attention {
                dense_extra += 4 * d as u64 * ((row.len * row.len) as u64 - seg_sq);
            }
        }
        let mut group_pos = Vec::with_capacity(sizes.len());
        for g in 0..sizes.len() {
            let mut pos = Vec::new();
            for (i, it) in items.iter().enumerate() {
                if gidx(it.p) == g {
                    pos.extend(item_start[i]..item_start[i] + lens[i]);
                }
            }
            group_pos.push(Rc::new(pos));
        }
        let uniform = if sizes.len() == 1 && pad_count == 0 { Some(0) } else { None };
        Stream { group, owner, segments, group_pos, sizes, uniform, pad_count, dense_extra, item_start }
    }

    fn len(&self) -> usize {
        self.group.len()
    }
}

struct Ctx<'a, 't, 'p> {
    b: &'a Binder<'t, 'p>,
    st: &'a Stream,
    owner: Rc<Vec<usize>>,
    norm_group: Rc<Vec<usize>>,
}

impl<'t> Ctx<'_, 't, '_> {
    fn param(&self, name: &str) -> Result<Var<'t>, BackboneError> {
        self.b.get(name)
    }

    /// LayerNorm with the affine parameters of each token's patch size.
    fn norm(&self, x: Var<'t>, site: &str) -> Result<Var<'t>, BackboneError> {
        let eps = self.b.params().config.norm_eps;
        let xn = x.normalize_rows(eps)?;
        if let Some(g) = self.st.uniform {
            let p = self.st.sizes[g];
            let gamma = self.param(&names::norm(site, p, "gamma"))?;
            let beta = self.param(&names::norm(site, p, "beta"))?;
            return Ok(xn.mul_row(&gamma)?.add_row(&beta)?);
        }
        let d = self.b.params().config.d;
        let mut gs = Vec::new();
        let mut bs = Vec::new();
        for &p in &self.st.sizes {
            gs.push(self.param(&names::norm(site, p, "gamma"))?.reshape(&[1, d])?);
            bs.push(self.param(&names::norm(site, p, "beta"))?.reshape(&[1, d])?);
        }
        let gamma = Var::concat_rows(&gs)?.gather_rows(self.norm_group.clone())?;
        let beta = Var::concat_rows(&bs)?.gather_rows(self.norm_group.clone())?;
        Ok(xn.mul(&gamma)?.add(&beta)?)
    }

    /// `x W + b` plus the low-rank update of every group that has one.
    fn linear(&self, x: Var<'t>, layer: &str, kind: FlopKind) -> Result<Var<'t>, BackboneError> {
        let tape = self.b.tape();
        let y = {
            let _s = tape.scope(kind);
            x.matmul(&self.param(&format!("{layer}.w"))?)?.add_row(&self.param(&format!("{layer}.b"))?)?
        };
        let mut y = y;
        let scale = self.b.params().config.lora_scale;
        for (g, &p) in self.st.sizes.iter().enumerate() {
            let down_name = names::lora(p, layer, "down");
            if !self.b.has(&down_name) {
                continue;
            }
            let _s = tape.scope(FlopKind::Lora);
            let down = self.param(&down_name)?;
            let up = self.param(&names::lora(p, layer, "up"))?;
            if self.st.uniform.is_some() {
                y = y.add(&x.matmul(&down)?.matmul(&up)?.scale(scale)?)?;
            } else {
                let idx = self.st.group_pos[g].clone();
                let delta = x.gather_rows(idx.clone())?.matmul(&down)?.matmul(&up)?.scale(scale)?;
                y = y.add(&delta.scatter_rows(idx, self.st.len())?)?;
            }
        }
        Ok(y)
    }

    fn modulate(&self, x: Var<'t>, shift: Var<'t>, scale: Var<'t>) -> Result<Var<'t>, BackboneError> {
        Ok(x.mul(&scale.add_scalar(1.0)?)?.add(&shift)?)
    }
}

fn check_items(params: &ModelParams, items: &[ForwardItem]) -> Result<(), BackboneError> {
    let cfg = &params.config;
    for it in items {
        params.check_patch(it.p)?;
        if it.t == 0 || it.t > cfg.steps {
            return Err(BackboneError::BadStep { t: it.t, steps: cfg.steps });
        }
        if it.x.shape() != [cfg.c_in, cfg.height, cfg.width] {
            return Err(BackboneError::Config(format!(
                "input {:?} does not match [{}, {}, {}]",
                it.x.shape(),
                cfg.c_in,
                cfg.height,
                cfg.width
            )));
        }
        match (&it.cond, cfg.conditioning) {
            (Cond::Class(c), Conditioning::Class) if *c >= cfg.num_classes => {
                return Err(BackboneError::BadCond(format!("class {c} out of {}", cfg.num_classes)))
            }
            (Cond::Tokens(ids), Conditioning::Cross) if ids.is_empty() || ids.iter().any(|&i| i >= cfg.vocab) => {
                return Err(BackboneError::BadCond(format!("context ids {ids:?} invalid for vocab {}", cfg.vocab)))
            }
            (Cond::Tokens(_), Conditioning::Class) | (Cond::Class(_), Conditioning::Cross) => {
                return Err(BackboneError::BadCond("conditioning kind does not match the model".into()))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Embedding weight and bias for patch size `p`.
fn embed_weights<'t>(b: &Binder<'t, '_>, p: usize) -> Result<(Var<'t>, Var<'t>), BackboneError> {
    let params = b.params();
    if params.mode != FlexMode::Shared {
        return Ok((b.get(&names::embed(p, "w"))?, b.get(&names::embed(p, "b"))?));
    }
    let w = b.get(names::FLEX_EMBED_W)?;
    let bias = b.get(names::FLEX_EMBED_B)?;
    if p == params.config.patch_spec()?.p_underlying {
        return Ok((w, bias));
    }
    let (qe, _) = params.projections(p).ok_or(BackboneError::UnsupportedPatch(p))?;
    let _s = b.tape().scope(FlopKind::Projection);
    Ok((b.tape().constant(qe.clone()).matmul(&w)?, bias))
}

fn deembed_weights<'t>(b: &Binder<'t, '_>, p: usize) -> Result<(Var<'t>, Var<'t>), BackboneError> {
    let params = b.params();
    if params.mode != FlexMode::Shared {
        return Ok((b.get(&names::deembed(p, "w"))?, b.get(&names::deembed(p, "b"))?));
    }
    let w = b.get(names::FLEX_DEEMBED_W)?;
    let bias = b.get(names::FLEX_DEEMBED_B)?;
    if p == params.config.patch_spec()?.p_underlying {
        return Ok((w, bias));
    }
    let (_, qd) = params.projections(p).ok_or(BackboneError::UnsupportedPatch(p))?;
    let _s = b.tape().scope(FlopKind::Projection);
    let qd = b.tape().constant(qd.clone());
    let n = bias.value().numel();
    let bias = bias.reshape(&[1, n])?.matmul(&qd)?;
    let m = bias.value().numel();
    Ok((w.matmul(&qd)?, bias.reshape(&[m])?))
}

fn positions<'t>(b: &Binder<'t, '_>, p: usize) -> Result<Var<'t>, BackboneError> {
    let cfg = &b.params().config;
    match cfg.pos_mode {
        PosMode::Sinusoidal => {
            Ok(b.tape().constant(positional_encoding(cfg.grid(p), p, (cfg.height, cfg.width), cfg.d)?))
        }
        PosMode::Learned => {
            let table = b.get(names::POS_TABLE)?;
            if p == cfg.p_powerful {
                return Ok(table);
            }
            let _s = b.tape().scope(FlopKind::Projection);
            let r = grid_resize(cfg.grid(cfg.p_powerful), cfg.grid(p));
            Ok(b.tape().constant(r).matmul(&table)?)
        }
    }
}

/// Run every item through the model in one packed stream.
pub fn forward_packed<'t>(
    b: &Binder<'t, '_>,
    items: &[ForwardItem],
    layout: &ExecLayout,
) -> Result<ForwardTrace<'t>, BackboneError> {
    let params = b.params();
    let cfg = &params.config;
    let tape = b.tape();
    check_items(params, items)?;
    if items.is_empty() {
        return Err(BackboneError::Layout("no items".into()));
    }
    let lens: Vec<usize> = items.iter().map(|it| cfg.tokens(it.p)).collect();
    layout.validate(&lens)?;
    let (d, h, w) = (cfg.d, cfg.height, cfg.width);
    let st = Stream::build(items, &lens, layout, d);
    let s_len = st.len();
    let n_groups = st.sizes.len();
    let ctx = Ctx {
        b,
        st: &st,
        owner: Rc::new(st.owner.clone()),
        norm_group: Rc::new(st.group.iter().map(|&g| if g == n_groups { 0 } else { g }).collect()),
    };

    // Patch embedding, one matmul per patch size.
    let mut parts = Vec::with_capacity(n_groups + 1);
    for &p in &st.sizes {
        let members: Vec<usize> = (0..items.len()).filter(|&i| items[i].p == p).collect();
        let n = cfg.tokens(p);
        let width = cfg.c_in * p * p;
        let mut data = Vec::with_capacity(members.len() * n * width);
        for &i in &members {
            data.extend(patchify(&ImageGrid { pixels: items[i].x.clone() }, p)?.into_data());
        }
        let x = tape.constant(Tensor::new(&[members.len() * n, width], data)?);
        let (wt, bias) = embed_weights(b, p)?;
        let mut e = {
            let _s = tape.scope(FlopKind::Embed);
            x.matmul(&wt)?.add_row(&bias)?
        };
        let pos = positions(b, p)?;
        let pos = if members.len() == 1 {
            pos
        } else {
            pos.gather_rows(Rc::new((0..members.len() * n).map(|k| k % n).collect()))?
        };
        e = e.add(&pos)?;
        if b.has(&names::pse(p)) {
            e = e.add_row(&b.get(&names::pse(p))?)?;
        }
        parts.push(e);
    }
    if st.pad_count > 0 {
        parts.push(tape.constant(Tensor::zeros(&[st.pad_count, d])));
    }
    let all = if parts.len() == 1 { parts[0] } else { Var::concat_rows(&parts)? };
    // Stream position of each row of `all`.
    let mut concat_to_stream: Vec<usize> = st.group_pos.iter().flat_map(|g| g.iter().copied()).collect();
    concat_to_stream.extend((0..s_len).filter(|&k| st.group[k] == n_groups));
    let identity = concat_to_stream.iter().enumerate().all(|(k, &s)| k == s);
    let mut x = if identity {
        all
    } else {
        let mut perm = vec![0; s_len];
        for (k, &s) in concat_to_stream.iter().enumerate() {
            perm[s] = k;
        }
        all.gather_rows(Rc::new(perm))?
    };

    // Conditioning vector per item.
    let bsz = items.len();
    let c = {
        let _s = tape.scope(FlopKind::Conditioning);
        let feats: Vec<f64> = items.iter().flat_map(|it| timestep_features(it.t, cfg.freq_dim)).collect();
        let tf = tape.constant(Tensor::new(&[bsz, cfg.freq_dim], feats)?);
        let temb = tf
            .matmul(&b.get("t_embed.fc1.w")?)?
            .add_row(&b.get("t_embed.fc1.b")?)?
            .silu()?
            .matmul(&b.get("t_embed.fc2.w")?)?
            .add_row(&b.get("t_embed.fc2.b")?)?;
        let cond = match cfg.conditioning {
            Conditioning::Class => {
                let labels: Vec<usize> = items
                    .iter()
                    .map(|it| match it.cond {
                        Cond::Class(k) => k,
                        _ => cfg.num_classes,
                    })
                    .collect();
                temb.add(&b.get("y_embed")?.gather_rows(Rc::new(labels))?)?
            }
            Conditioning::Cross => temb,
        };
        cond.silu()?
    };

    // Context tokens and cross-attention mask, aligned with stream segments.
    let cross = if cfg.conditioning == Conditioning::Cross {
        let mut ids = Vec::new();
        let mut kv_lens = Vec::new();
        for row in &layout.rows {
            for &i in &row.items {
                let seg: Vec<usize> = match &items[i].cond {
                    Cond::Tokens(t) => t.clone(),
                    _ => vec![cfg.vocab],
                };
                kv_lens.push(seg.len());
                ids.extend(seg);
            }
            let pad = row.len - row.items.iter().map(|&i| lens[i]).sum::<usize>();
            if pad > 0 && layout.pad_linears {
                kv_lens.push(1);
                ids.push(cfg.vocab);
            }
        }
        let tokens = b.get("ctx_embed")?.gather_rows(Rc::new(ids))?;
        Some((tokens, SegmentMask::cross(st.segments.clone(), kv_lens)?))
    } else {
        None
    };

    let embedded = x;
    let mask = SegmentMask::new(st.segments.clone());
    let mut blocks = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        x = dit_block(&ctx, x, c, l, &mask, cross.as_ref())?;
        blocks.push(x);
    }

    // Final modulation and de-embedding.
    let fm = {
        let _s = tape.scope(FlopKind::Conditioning);
        c.matmul(&b.get("final.adaln.w")?)?.add_row(&b.get("final.adaln.b")?)?.gather_rows(ctx.owner.clone())?
    };
    let hn = ctx.norm(x, "final.norm")?;
    let hn = ctx.modulate(hn, fm.slice_cols(0, d)?, fm.slice_cols(d, d)?)?;
    let mut outputs: Vec<Option<Var<'t>>> = vec![None; bsz];
    for (g, &p) in st.sizes.iter().enumerate() {
        let hg = if st.uniform.is_some() { hn } else { hn.gather_rows(st.group_pos[g].clone())? };
        let (wt, bias) = deembed_weights(b, p)?;
        let y = {
            let _s = tape.scope(FlopKind::Deembed);
            hg.matmul(&wt)?.add_row(&bias)?
        };
        let width = cfg.c_out * p * p;
        let unpatch = unpatchify_indices(cfg.c_out, h, w, p)?;
        let mut offset = 0;
        for (i, it) in items.iter().enumerate() {
            if it.p != p {
                continue;
            }
            let base = offset * width;
            let idx: Vec<usize> = unpatch.iter().map(|&k| base + k).collect();
            outputs[i] = Some(y.gather(Rc::new(idx), &[cfg.c_out, h, w])?);
            offset += lens[i];
        }
    }
    if st.dense_extra > 0 {
        tape.add_flops(FlopKind::AttnMatmul, st.dense_extra * cfg.depth as u64);
    }
    Ok(ForwardTrace {
        embedded,
        cond: c,
        outputs: outputs.into_iter().map(|o| o.expect("every item decoded")).collect(),
        blocks,
        item_start: st.item_start.clone(),
        item_len: lens,
    })
}

fn dit_block<'t>(
    ctx: &Ctx<'_, 't, '_>,
    x: Var<'t>,
    c: Var<'t>,
    l: usize,
    mask: &SegmentMask,
    cross: Option<&(Var<'t>, SegmentMask)>,
) -> Result<Var<'t>, BackboneError> {
    let tape = ctx.b.tape();
    let cfg = &ctx.b.params().config;
    let d = cfg.d;
    let name = |s: &str| names::block(l, s);
    let m = {
        let _s = tape.scope(FlopKind::Conditioning);
        c.matmul(&ctx.param(&name("adaln.w"))?)?
            .add_row(&ctx.param(&name("adaln.b"))?)?
            .gather_rows(ctx.owner.clone())?
    };
    let part = |k: usize| m.slice_cols(k * d, d);

    let hn = ctx.norm(x, &name("norm1"))?;
    let hn = ctx.modulate(hn, part(0)?, part(1)?)?;
    let q = ctx.linear(hn, &name("attn.q"), FlopKind::AttnLinear)?;
    let k = ctx.linear(hn, &name("attn.k"), FlopKind::AttnLinear)?;
    let v = ctx.linear(hn, &name("attn.v"), FlopKind::AttnLinear)?;
    let a = {
        let _s = tape.scope(FlopKind::AttnMatmul);
        q.attention(&k, &v, cfg.heads, mask)?
    };
    let o = ctx.linear(a, &name("attn.out"), FlopKind::AttnLinear)?;
    let mut x = x.add(&part(2)?.mul(&o)?)?;

    if let Some((tokens, xmask)) = cross {
        let _s = tape.scope(FlopKind::CrossAttn);
        let lin = |v: Var<'t>, layer: &str| -> Result<Var<'t>, BackboneError> {
            Ok(v.matmul(&ctx.param(&name(&format!("{layer}.w")))?)?
                .add_row(&ctx.param(&name(&format!("{layer}.b")))?)?)
        };
        let hx = ctx.norm(x, &name("norm_x"))?;
        let q = lin(hx, "xattn.q")?;
        let k = lin(*tokens, "xattn.k")?;
        let v = lin(*tokens, "xattn.v")?;
        let a = q.attention(&k, &v, cfg.heads, xmask)?;
        x = x.add(&lin(a, "xattn.out")?)?;
    }

    let hn = ctx.norm(x, &name("norm2"))?;
    let hn = ctx.modulate(hn, part(3)?, part(4)?)?;
    let f = ctx.linear(hn, &name("mlp.fc1"), FlopKind::Mlp)?.gelu()?;
    let f = ctx.linear(f, &name("mlp.fc2"), FlopKind::Mlp)?;
    Ok(x.add(&part(5)?.mul(&f)?)?)
}

fn split_output(cfg: &super::ModelConfig, out: &Tensor) -> Result<ModelOutput, BackboneError> {
    let n = cfg.c_in * cfg.height * cfg.width;
    let shape = [cfg.c_in, cfg.height, cfg.width];
    let eps = Tensor::new(&shape, out.data()[..n].to_vec())?;
    let var_logits =
        if cfg.learns_variance() { Some(Tensor::new(&shape, out.data()[n..].to_vec())?) } else { None };
    Ok(ModelOutput { eps, var_logits })
}

impl ModelParams {
    /// Gradient-free batched prediction. Returns outputs and the FLOPs spent.
    pub fn predict_batch(
        &self,
        items: &[ForwardItem],
        layout: &ExecLayout,
    ) -> Result<(Vec<ModelOutput>, FlopCounter), BackboneError> {
        let tape = Tape::no_grad();
        let b = Binder::frozen(&tape, self);
        let trace = forward_packed(&b, items, layout)?;
        let outs = trace.outputs.iter().map(|v| split_output(&self.config, &v.value())).collect::<Result<_, _>>()?;
        Ok((outs, tape.flops()))
    }

    /// Each item in its own segment.
    pub fn predict_many(&self, items: &[ForwardItem]) -> Result<Vec<ModelOutput>, BackboneError> {
        let lens: Vec<usize> = items.iter().map(|it| self.config.tokens(it.p)).collect();
        Ok(self.predict_batch(items, &ExecLayout::independent(&lens))?.0)
    }

    /// Single-image prediction `eps_theta(x_t, t, cond; p)`.
    pub fn predict(&self, x: &Tensor, t: usize, cond: &Cond, p: usize) -> Result<ModelOutput, BackboneError> {
        let item = ForwardItem { x: x.clone(), t, cond: cond.clone(), p };
        Ok(self.predict_many(std::slice::from_ref(&item))?.remove(0))
    }

    /// Block outputs of a single-item forward, `[N, d]` per block.
    pub fn activations(&self, x: &Tensor, t: usize, cond: &Cond, p: usize) -> Result<Vec<Tensor>, BackboneError> {
        let tape = Tape::no_grad();
        let b = Binder::frozen(&tape, self);
        let item = ForwardItem { x: x.clone(), t, cond: cond.clone(), p };
        let trace = forward_packed(&b, &[item], &ExecLayout::independent(&[self.config.tokens(p)]))?;
        Ok(trace.blocks.iter().map(|v| (*v.value()).clone()).collect())
    }
}
