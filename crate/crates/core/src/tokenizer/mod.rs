//! Patch tokenization at arbitrary patch sizes and pseudo-inverse weight resizing.
//!
//! Patches flatten channel-major, then row-major inside the patch: element
//! `(c, r, s)` of a `p x p` patch lands at column `c*p*p + r*p + s`.

use std::collections::BTreeMap;

use crate::numerics::{Matrix, NumericsError, Tensor};

mod flexi;
mod positional;


pub use flexi::{FlexiEmbeddings, ProjectionPair};
pub use positional::{grid_resize, positional_encoding, PatchSizeTable, POS_REFERENCE_GRID};

/// Identifier stored in checkpoints for the flattening order above.
pub const FLATTEN_ORDER: &str = "channel-major/row-major";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TokenizerError {
    #[error("patch size {p} does not divide image {h}x{w}")]
    NotDivisible { p: usize, h: usize, w: usize },
    #[error("patch size {0} is not supported")]
    Unsupported(usize),
    #[error("patch size {0} is not registered")]
    Unregistered(usize),
    #[error("invalid patch spec: {0}")]
    InvalidSpec(String),
    #[error("projection for patch size {p} is rank deficient (rank {rank}, need {need})")]
    RankDeficient { p: usize, rank: usize, need: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Patch-size registry of a flexible model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub p_powerful: usize,
    pub p_weak: usize,
    pub p_underlying: usize,
    /// Ascending.
    pub supported: Vec<usize>,
}

impl PatchSpec {
    /// Powerful/weak pair with `p_weak = 2 * p_powerful` and `p' = p_weak`.
    pub fn standard(p_powerful: usize) -> Self {
        let p_weak = 2 * p_powerful;
        Self { p_powerful, p_weak, p_underlying: p_weak, supported: vec![p_powerful, p_weak] }
    }

    /// Explicit registry; `p'` is the largest supported size.
    pub fn new(p_powerful: usize, p_weak: usize, supported: &[usize]) -> Result<Self, TokenizerError> {
        let mut supported = supported.to_vec();
        supported.sort_unstable();
        supported.dedup();
        let p_underlying = *supported.last().ok_or_else(|| TokenizerError::InvalidSpec("no patch sizes".into()))?;
        let spec = Self { p_powerful, p_weak, p_underlying, supported };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), TokenizerError> {
        if self.supported.is_empty() || self.supported.contains(&0) {
            return Err(TokenizerError::InvalidSpec("patch sizes must be positive".into()));
        }
        if !self.supported.windows(2).all(|w| w[0] < w[1]) {
            return Err(TokenizerError::InvalidSpec("supported sizes must be strictly ascending".into()));
        }
        for p in [self.p_powerful, self.p_weak] {
            if !self.supported.contains(&p) {
                return Err(TokenizerError::InvalidSpec(format!("{p} missing from supported sizes")));
            }
            if p > self.p_underlying {
                return Err(TokenizerError::InvalidSpec(format!("{p} exceeds underlying size {}", self.p_underlying)));
            }
        }
        if self.p_weak < self.p_powerful {
            return Err(TokenizerError::InvalidSpec("weak patch size must not be smaller than powerful".into()));
        }
        Ok(())
    }

    pub fn is_supported(&self, p: usize) -> bool {
        self.supported.contains(&p)
    }

    pub fn check_supported(&self, p: usize) -> Result<(), TokenizerError> {
        if self.is_supported(p) {
            Ok(())
        } else {
            Err(TokenizerError::Unsupported(p))
        }
    }

    pub fn p_max(&self) -> usize {
        *self.supported.last().expect("validated")
    }

    /// Every supported size must tile the image.
    pub fn check_image(&self, h: usize, w: usize) -> Result<(), TokenizerError> {
        for &p in &self.supported {
            if h % p != 0 || w % p != 0 {
                return Err(TokenizerError::NotDivisible { p, h, w });
            }
        }
        Ok(())
    }

    pub fn tokens(&self, p: usize, h: usize, w: usize) -> usize {
        (h / p) * (w / p)
    }
}

/// A single image `[c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub pixels: Tensor,
}

impl ImageGrid {
    pub fn new(pixels: Tensor) -> Result<Self, TokenizerError> {
        if pixels.ndim() != 3 {
            return Err(TokenizerError::Shape(format!("image must be [c,h,w], got {:?}", pixels.shape())));
        }
        if !pixels.is_finite() {
            return Err(TokenizerError::Numerics(NumericsError::NonFinite { op: "image" }));
        }
        Ok(Self { pixels })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { pixels: Tensor::zeros(&[c, h, w]) }
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// `[N, d]` token block produced at one patch size.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub patch_size: usize,
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// For each output slot of `[N, c*p*p]`, the flat index into `[c, h, w]`.
pub fn patchify_indices(c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>, TokenizerError> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(TokenizerError::NotDivisible { p, h, w });
    }
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(c * h * w);
    for gi in 0..gh {
        for gj in 0..gw {
            for ch in 0..c {
                for r in 0..p {
                    for s in 0..p {
                        idx.push(ch * h * w + (gi * p + r) * w + gj * p + s);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse permutation of [`patchify_indices`].
pub fn unpatchify_indices(c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>, TokenizerError> {
    let fwd = patchify_indices(c, h, w, p)?;
    let mut inv = vec![0; fwd.len()];
    for (k, &src) in fwd.iter().enumerate() {
        inv[src] = k;
    }
    Ok(inv)
}

/// Split an image into `N = (h/p)(w/p)` raster-ordered flattened patches.
pub fn patchify(img: &ImageGrid, p: usize) -> Result<Tensor, TokenizerError> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let idx = patchify_indices(c, h, w, p)?;
    let data = idx.iter().map(|&i| img.pixels.data()[i]).collect();
    Ok(Tensor::new(&[(h / p) * (w / p), c * p * p], data)?)
}

pub fn unpatchify(tokens: &Tensor, c: usize, h: usize, w: usize, p: usize) -> Result<ImageGrid, TokenizerError> {
    if tokens.numel() != c * h * w {
        return Err(TokenizerError::Shape(format!("{:?} cannot form [{c},{h},{w}]", tokens.shape())));
    }
    let idx = unpatchify_indices(c, h, w, p)?;
    let data = idx.iter().map(|&i| tokens.data()[i]).collect();
    Ok(ImageGrid { pixels: Tensor::new(&[c, h, w], data)? })
}

/// 1-D bilinear resampling matrix `[b, a]` with half-pixel centers and edge clamping.
pub fn build_resize_1d(a: usize, b: usize) -> Matrix {
    let mut m = Matrix::zeros(b, a);
    let ratio = a as f64 / b as f64;
    for o in 0..b {
        let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(a - 1);
        let i1 = (i0 + 1).min(a - 1);
        let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
        m.set(o, i0, m.get(o, i0) + 1.0 - frac);
        if frac > 0.0 {
            m.set(o, i1, m.get(o, i1) + frac);
        }
    }
    m
}

/// Matrix `[b*b, a*a]` applying a bilinear `a x a -> b x b` resize to a flattened patch.
pub fn build_resize_matrix(a: usize, b: usize) -> Matrix {
    let r = build_resize_1d(a, b);
    let mut m = Matrix::zeros(b * b, a * a);
    for y in 0..b {
        for x in 0..b {
            for i in 0..a {
                let wy = r.get(y, i);
                if wy == 0.0 {
                    continue;
                }
                for j in 0..a {
                    let wx = r.get(x, j);
                    if wx != 0.0 {
                        m.set(y * b + x, i * a + j, wy * wx);
                    }
                }
            }
        }
    }
    m
}

/// `Q_embed(p)`: pseudo-inverse of the `p -> p'` bilinear upsampling, shape `[p*p, p'*p']`.
pub fn embed_projection(spec: &PatchSpec, p: usize) -> Result<Matrix, TokenizerError> {
    let pu = spec.p_underlying;
    if p > pu {
        return Err(TokenizerError::InvalidSpec(format!("patch size {p} exceeds underlying {pu}")));
    }
    let q = build_resize_matrix(p, pu).pseudo_inverse()?;
    let rank = q.rank()?;
    if rank != p * p {
        return Err(TokenizerError::RankDeficient { p, rank, need: p * p });
    }
    Ok(q)
}

/// `Q_de-embed(p)`: pseudo-inverse of the `p' -> p` bilinear downsampling, shape `[p'*p', p*p]`.
pub fn deembed_projection(spec: &PatchSpec, p: usize) -> Result<Matrix, TokenizerError> {
    let pu = spec.p_underlying;
    if p > pu {
        return Err(TokenizerError::InvalidSpec(format!("patch size {p} exceeds underlying {pu}")));
    }
    let q = build_resize_matrix(pu, p).pseudo_inverse()?;
    let rank = q.rank()?;
    if rank != p * p {
        return Err(TokenizerError::RankDeficient { p, rank, need: p * p });
    }
    Ok(q)
}

/// Per-size projection cache over a whole spec.
pub fn projection_cache(spec: &PatchSpec) -> Result<BTreeMap<usize, ProjectionPair>, TokenizerError> {
    spec.supported
        .iter()
        .map(|&p| Ok((p, ProjectionPair { embed: embed_projection(spec, p)?, deembed: deembed_projection(spec, p)? })))
        .collect()
}
