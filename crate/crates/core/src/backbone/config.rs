use serde::{Deserialize, Serialize};

use super::BackboneError;
use crate::tokenizer::PatchSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// adaLN conditioning on a class label.
    Class,
    /// Frozen cross-attention over caller-supplied token ids.
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosMode {
    Sinusoidal,
    /// Table learned on the powerful grid, bilinearly resampled for other sizes.
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlexMode {
    /// Single patch size, as pretrained.
    Base,
    /// One set of weights for every patch size, embeddings stored at `p'`.
    Shared,
    /// Frozen base plus per-size adapters, embeddings and norms.
    Lora,
}

impl FlexMode {
    pub fn name(self) -> &'static str {
        match self {
            FlexMode::Base => "base",
            FlexMode::Shared => "shared",
            FlexMode::Lora => "lora",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub d: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub conditioning: Conditioning,
    pub num_classes: usize,
    /// Context-token vocabulary for cross-attention conditioning.
    pub vocab: usize,
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub p_powerful: usize,
    pub p_weak: usize,
    pub patch_sizes: Vec<usize>,
    pub pos_mode: PosMode,
    pub d_lora: usize,
    pub lora_scale: f64,
    pub freq_dim: usize,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            d: 64,
            heads: 4,
            mlp_ratio: 4,
            c_in: 1,
            c_out: 1,
            conditioning: Conditioning::Class,
            num_classes: 3,
            vocab: 8,
            steps: 100,
            height: 16,
            width: 16,
            p_powerful: 2,
            p_weak: 4,
            patch_sizes: vec![2, 4],
            pos_mode: PosMode::Sinusoidal,
            d_lora: 32,
            lora_scale: 1.0,
            freq_dim: 64,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self { depth: 2, d: 16, heads: 2, height: 8, width: 8, d_lora: 4, freq_dim: 8, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |m: String| Err(BackboneError::Config(m));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d={} not divisible by heads={}", self.d, self.heads));
        }
        if self.d % 4 != 0 {
            return bad(format!("d={} must be a multiple of 4", self.d));
        }
        if self.c_in == 0 || (self.c_out != self.c_in && self.c_out != 2 * self.c_in) {
            return bad(format!("c_out={} must equal c_in or 2*c_in (c_in={})", self.c_out, self.c_in));
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.freq_dim == 0 || self.freq_dim % 2 != 0 {
            return bad("freq_dim must be even and positive".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        match self.conditioning {
            Conditioning::Class if self.num_classes == 0 => return bad("num_classes must be positive".into()),
            Conditioning::Cross if self.vocab == 0 => return bad("vocab must be positive".into()),
            _ => {}
        }
        let spec = self.patch_spec()?;
        spec.check_image(self.height, self.width)?;
        Ok(())
    }

    pub fn patch_spec(&self) -> Result<PatchSpec, BackboneError> {
        Ok(PatchSpec::new(self.p_powerful, self.p_weak, &self.patch_sizes)?)
    }

    pub fn d_head(&self) -> usize {
        self.d / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.mlp_ratio * self.d
    }

    pub fn tokens(&self, p: usize) -> usize {
        (self.height / p) * (self.width / p)
    }

    pub fn grid(&self, p: usize) -> (usize, usize) {
        (self.height / p, self.width / p)
    }

    pub fn learns_variance(&self) -> bool {
        self.c_out == 2 * self.c_in
    }
}
