use std::collections::{BTreeMap, BTreeSet};

use super::{BackboneError, FlexMode, ModelConfig, PosMode, Conditioning};
use crate::numerics::{matmul, SplitRng, Tensor};
use crate::tokenizer::{positional_encoding, FlexiEmbeddings};

/// Linear layers that receive adapters, relative to `blocks.{l}.`.
pub const ADAPTED_LAYERS: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.out", "mlp.fc1", "mlp.fc2"];

pub mod names {
    pub fn block(l: usize, rest: &str) -> String {
        format!("blocks.{l}.{rest}")
    }

    pub fn norm(site: &str, p: usize, which: &str) -> String {
        format!("{site}.p{p}.{which}")
    }

    pub fn embed(p: usize, which: &str) -> String {
        format!("embed.p{p}.{which}")
    }

    pub fn deembed(p: usize, which: &str) -> String {
        format!("deembed.p{p}.{which}")
    }

    pub fn pse(p: usize) -> String {
        format!("pse.p{p}")
    }

    pub fn lora(p: usize, layer: &str, which: &str) -> String {
        format!("lora.p{p}.{layer}.{which}")
    }

    pub const FLEX_EMBED_W: &str = "flex.embed.w";
    pub const FLEX_EMBED_B: &str = "flex.embed.b";
    pub const FLEX_DEEMBED_W: &str = "flex.deembed.w";
    pub const FLEX_DEEMBED_B: &str = "flex.deembed.b";
    pub const POS_TABLE: &str = "pos.table";
}

/// How fresh weights are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitStyle {
    /// DiT-style: zero adaLN gates and zero output layer, so a fresh model predicts zero.
    Training,
    /// Every tensor random, for equivalence tests that need non-trivial paths.
    Random,
}

/// Parameter-count summary of a flexified model against its base.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamReport {
    pub base: usize,
    pub total: usize,
    pub added: usize,
    pub trainable: usize,
}

impl ParamReport {
    pub fn added_fraction(&self) -> f64 {
        self.added as f64 / self.base as f64
    }
}

/// Named weights of a DiT, possibly flexified.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub mode: FlexMode,
    pub tensors: BTreeMap<String, Tensor>,
    pub frozen: BTreeSet<String>,
    /// Set on a copy whose adapters for this size were folded into the base weights.
    pub merged_for: Option<usize>,
    projections: BTreeMap<usize, (Tensor, Tensor)>,
}

struct Init<'a> {
    rng: SplitRng,
    style: InitStyle,
    out: &'a mut BTreeMap<String, Tensor>,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, d_in: usize, d_out: usize, zero: bool) {
        let w = match (self.style, zero) {
            (InitStyle::Training, true) => Tensor::zeros(&[d_in, d_out]),
            (InitStyle::Training, false) => {
                let a = (6.0 / (d_in + d_out) as f64).sqrt();
                self.rng.uniform_tensor(&[d_in, d_out], -a, a)
            }
            (InitStyle::Random, _) => self.rng.normal_tensor(&[d_in, d_out]).scale(1.0 / (d_in as f64).sqrt()),
        };
        let b = match self.style {
            InitStyle::Training => Tensor::zeros(&[d_out]),
            InitStyle::Random => self.rng.normal_tensor(&[d_out]).scale(0.1),
        };
        self.out.insert(format!("{name}.w"), w);
        self.out.insert(format!("{name}.b"), b);
    }

    fn table(&mut self, name: &str, rows: usize, d: usize) {
        let t = self.rng.normal_tensor(&[rows, d]).scale(match self.style {
            InitStyle::Training => 0.02,
            InitStyle::Random => 0.5,
        });
        self.out.insert(name.to_string(), t);
    }

    fn norm(&mut self, site: &str, p: usize, d: usize) {
        let (g, b) = match self.style {
            InitStyle::Training => (Tensor::ones(&[d]), Tensor::zeros(&[d])),
            InitStyle::Random => {
                (self.rng.normal_tensor(&[d]).scale(0.1).map(|v| v + 1.0), self.rng.normal_tensor(&[d]).scale(0.1))
            }
        };
        self.out.insert(names::norm(site, p, "gamma"), g);
        self.out.insert(names::norm(site, p, "beta"), b);
    }
}

impl ModelParams {
    /// Fresh single-patch-size model at `config.p_powerful`.
    pub fn init(config: &ModelConfig, seed: u64, style: InitStyle) -> Result<Self, BackboneError> {
        config.validate()?;
        let (d, p0) = (config.d, config.p_powerful);
        let mut tensors = BTreeMap::new();
        let mut init = Init { rng: SplitRng::new(seed), style, out: &mut tensors };
        init.linear("t_embed.fc1", config.freq_dim, d, false);
        init.linear("t_embed.fc2", d, d, false);
        match config.conditioning {
            Conditioning::Class => init.table("y_embed", config.num_classes + 1, d),
            Conditioning::Cross => init.table("ctx_embed", config.vocab + 1, d),
        }
        init.linear(&format!("embed.p{p0}"), config.c_in * p0 * p0, d, false);
        if config.pos_mode == PosMode::Learned {
            let pe = positional_encoding(config.grid(p0), p0, (config.height, config.width), d)?;
            init.out.insert(names::POS_TABLE.into(), pe);
        }
        for l in 0..config.depth {
            let b = |s: &str| names::block(l, s);
            for layer in ["attn.q", "attn.k", "attn.v"] {
                init.linear(&b(layer), d, d, false);
            }
            init.linear(&b("attn.out"), d, d, false);
            init.linear(&b("mlp.fc1"), d, config.hidden(), false);
            init.linear(&b("mlp.fc2"), config.hidden(), d, false);
            init.linear(&b("adaln"), d, 6 * d, true);
            init.norm(&b("norm1"), p0, d);
            init.norm(&b("norm2"), p0, d);
            if config.conditioning == Conditioning::Cross {
                for layer in ["xattn.q", "xattn.k", "xattn.v"] {
                    init.linear(&b(layer), d, d, false);
                }
                init.linear(&b("xattn.out"), d, d, true);
                init.norm(&b("norm_x"), p0, d);
            }
        }
        init.linear("final.adaln", d, 2 * d, true);
        init.norm("final.norm", p0, d);
        init.linear(&format!("deembed.p{p0}"), d, config.c_out * p0 * p0, true);
        Ok(Self {
            config: config.clone(),
            mode: FlexMode::Base,
            tensors,
            frozen: BTreeSet::new(),
            merged_for: None,
            projections: BTreeMap::new(),
        })
    }

    /// Reassemble from stored tensors, e.g. after loading a checkpoint.
    pub fn from_parts(
        config: ModelConfig,
        mode: FlexMode,
        tensors: BTreeMap<String, Tensor>,
        frozen: BTreeSet<String>,
        merged_for: Option<usize>,
    ) -> Result<Self, BackboneError> {
        config.validate()?;
        let mut out = Self { config, mode, tensors, frozen, merged_for, projections: BTreeMap::new() };
        out.rebuild_projections()?;
        Ok(out)
    }

    fn rebuild_projections(&mut self) -> Result<(), BackboneError> {
        self.projections.clear();
        if self.mode == FlexMode::Shared {
            let spec = self.config.patch_spec()?;
            let fe = FlexiEmbeddings::zeros(&spec, self.config.c_in, self.config.c_out, self.config.d)?;
            for &p in &spec.supported {
                self.projections.insert(p, fe.kron_projections(p)?.clone());
            }
        }
        Ok(())
    }

    /// `(I ⊗ Q_embed(p), I ⊗ Q_deembed(p))` in shared mode.
    pub fn projections(&self, p: usize) -> Option<&(Tensor, Tensor)> {
        self.projections.get(&p)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, BackboneError> {
        self.tensors.get(name).ok_or_else(|| BackboneError::MissingParam(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Patch sizes this instance can run.
    pub fn supported(&self) -> Vec<usize> {
        match (self.mode, self.merged_for) {
            (_, Some(p)) => vec![p],
            (FlexMode::Base, None) => vec![self.config.p_powerful],
            _ => self.config.patch_sizes.clone(),
        }
    }

    pub fn check_patch(&self, p: usize) -> Result<(), BackboneError> {
        if let Some(m) = self.merged_for {
            if m != p {
                return Err(BackboneError::MergedFor { merged: m, requested: p });
            }
        }
        if !self.supported().contains(&p) {
            return Err(BackboneError::UnsupportedPatch(p));
        }
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.contains(name)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors.keys().filter(|n| self.is_trainable(n)).cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors.iter().filter(|(n, _)| self.is_trainable(n)).map(|(_, t)| t.numel()).sum()
    }

    pub fn report_against(&self, base: &ModelParams) -> ParamReport {
        let (b, t) = (base.num_params(), self.num_params());
        ParamReport { base: b, total: t, added: t.saturating_sub(b), trainable: self.num_trainable() }
    }

    /// Order-stable sum over the named tensors, used to detect mutation.
    pub fn checksum(&self, names: &BTreeSet<String>) -> f64 {
        names.iter().filter_map(|n| self.tensors.get(n)).map(|t| t.data().iter().sum::<f64>()).sum()
    }

    /// Adapter layer names (without `.down`/`.up`) registered for `p`.
    pub fn adapter_layers(&self, p: usize) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.config.depth {
            for layer in ADAPTED_LAYERS {
                let name = names::block(l, layer);
                if self.has(&names::lora(p, &name, "down")) {
                    out.push(name);
                }
            }
        }
        out
    }

    /// Turn a base model into a multi-patch-size model.
    pub fn flexify(&self, mode: FlexMode, seed: u64) -> Result<Self, BackboneError> {
        if self.mode != FlexMode::Base {
            return Err(BackboneError::Config(format!("model is already flexified ({})", self.mode.name())));
        }
        let cfg = &self.config;
        let spec = cfg.patch_spec()?;
        let p0 = cfg.p_powerful;
        let fe = FlexiEmbeddings::init_from_pretrained(
            self.get(&names::embed(p0, "w"))?,
            self.get(&names::embed(p0, "b"))?,
            self.get(&names::deembed(p0, "w"))?,
            self.get(&names::deembed(p0, "b"))?,
            &spec,
            cfg.c_in,
        )?;
        let mut out = self.clone();
        out.mode = mode;
        let mut sites = vec!["final.norm".to_string()];
        for l in 0..cfg.depth {
            sites.push(names::block(l, "norm1"));
            sites.push(names::block(l, "norm2"));
            if cfg.conditioning == Conditioning::Cross {
                sites.push(names::block(l, "norm_x"));
            }
        }
        let new_sizes: Vec<usize> = spec.supported.iter().copied().filter(|&p| p != p0).collect();
        for site in &sites {
            for which in ["gamma", "beta"] {
                let src = self.get(&names::norm(site, p0, which))?.clone();
                for &p in &new_sizes {
                    out.tensors.insert(names::norm(site, p, which), src.clone());
                }
            }
        }
        match mode {
            FlexMode::Base => return Err(BackboneError::Config("cannot flexify into base mode".into())),
            FlexMode::Shared => {
                for which in ["w", "b"] {
                    out.tensors.remove(&names::embed(p0, which));
                    out.tensors.remove(&names::deembed(p0, which));
                }
                out.tensors.insert(names::FLEX_EMBED_W.into(), fe.w_embed.clone());
                out.tensors.insert(names::FLEX_EMBED_B.into(), fe.b_embed.clone());
                out.tensors.insert(names::FLEX_DEEMBED_W.into(), fe.w_deembed.clone());
                out.tensors.insert(names::FLEX_DEEMBED_B.into(), fe.b_deembed.clone());
                for &p in &spec.supported {
                    out.tensors.insert(names::pse(p), Tensor::zeros(&[cfg.d]));
                }
            }
            FlexMode::Lora => {
                out.frozen = self.tensors.keys().cloned().collect();
                let mut rng = SplitRng::stream(seed, 0x10a);
                for &p in &new_sizes {
                    let (we, be) = fe.instantiate_embed(p)?;
                    let (wd, bd) = fe.instantiate_deembed(p)?;
                    out.tensors.insert(names::embed(p, "w"), we);
                    out.tensors.insert(names::embed(p, "b"), be);
                    out.tensors.insert(names::deembed(p, "w"), wd);
                    out.tensors.insert(names::deembed(p, "b"), bd);
                    out.tensors.insert(names::pse(p), Tensor::zeros(&[cfg.d]));
                    for l in 0..cfg.depth {
                        for layer in ADAPTED_LAYERS {
                            let name = names::block(l, layer);
                            let w = self.get(&format!("{name}.w"))?;
                            let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
                            let down = rng.normal_tensor(&[d_in, cfg.d_lora]).scale(1.0 / (d_in as f64).sqrt());
                            out.tensors.insert(names::lora(p, &name, "down"), down);
                            out.tensors.insert(names::lora(p, &name, "up"), Tensor::zeros(&[cfg.d_lora, d_out]));
                        }
                    }
                }
            }
        }
        out.rebuild_projections()?;
        Ok(out)
    }

    /// Copy with the adapters of `p` folded into the base weights: `W + scale * down * up`.
    pub fn merge_loras(&self, p: usize) -> Result<Self, BackboneError> {
        if self.merged_for.is_some() {
            return Err(BackboneError::DoubleMerge(p));
        }
        let layers = self.adapter_layers(p);
        if layers.is_empty() {
            return Err(BackboneError::MissingParam(format!("adapters for patch size {p}")));
        }
        let mut out = self.clone();
        for name in &layers {
            let down = self.get(&names::lora(p, name, "down"))?;
            let up = self.get(&names::lora(p, name, "up"))?;
            let delta = matmul(down, up)?.scale(self.config.lora_scale);
            let w = out.tensors.get_mut(&format!("{name}.w")).expect("adapted layer has a weight");
            w.add_assign(&delta)?;
        }
        out.tensors.retain(|n, _| !n.starts_with("lora."));
        out.frozen.retain(|n| out.tensors.contains_key(n));
        out.merged_for = Some(p);
        Ok(out)
    }

    /// Randomize every adapter `up` matrix, to exercise adapter paths in tests.
    pub fn randomize_adapters(&mut self, seed: u64, std: f64) {
        let mut rng = SplitRng::stream(seed, 0x10b);
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with("lora.") && name.ends_with(".up") {
                *t = rng.normal_tensor(t.shape()).scale(std);
            }
        }
    }
}
