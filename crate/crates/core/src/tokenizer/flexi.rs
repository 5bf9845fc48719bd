use std::collections::BTreeMap;

use super::{projection_cache, PatchSpec, TokenizerError};
use crate::numerics::{matmul, Matrix, Tensor};

/// `(Q_embed(p), Q_deembed(p))` for one patch size.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionPair {
    pub embed: Matrix,
    pub deembed: Matrix,
}

/// Embedding and de-embedding weights stored at the underlying patch size `p'`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlexiEmbeddings {
    pub spec: PatchSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub d: usize,
    /// `[c_in*p'*p', d]`
    pub w_embed: Tensor,
    pub b_embed: Tensor,
    /// `[d, c_out*p'*p']`
    pub w_deembed: Tensor,
    pub b_deembed: Tensor,
    cache: BTreeMap<usize, ProjectionPair>,
    kron_cache: BTreeMap<usize, (Tensor, Tensor)>,
}

fn check_shape(name: &str, t: &Tensor, want: &[usize]) -> Result<(), TokenizerError> {
    if t.shape() != want {
        return Err(TokenizerError::Shape(format!("{name}: expected {want:?}, got {:?}", t.shape())));
    }
    Ok(())
}

impl FlexiEmbeddings {
    /// Zero-initialized weights with all projections precomputed.
    pub fn zeros(spec: &PatchSpec, c_in: usize, c_out: usize, d: usize) -> Result<Self, TokenizerError> {
        spec.validate()?;
        if c_out != c_in && c_out != 2 * c_in {
            return Err(TokenizerError::Shape(format!("c_out must be {c_in} or {}, got {c_out}", 2 * c_in)));
        }
        let pu2 = spec.p_underlying * spec.p_underlying;
        let cache = projection_cache(spec)?;
        let kron_cache = cache
            .iter()
            .map(|(&p, pair)| {
                (p, (pair.embed.kron_identity(c_in).to_tensor(), pair.deembed.kron_identity(c_out).to_tensor()))
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            c_in,
            c_out,
            d,
            w_embed: Tensor::zeros(&[c_in * pu2, d]),
            b_embed: Tensor::zeros(&[d]),
            w_deembed: Tensor::zeros(&[d, c_out * pu2]),
            b_deembed: Tensor::zeros(&[c_out * pu2]),
            cache,
            kron_cache,
        })
    }

    /// Lift weights trained at `spec.p_powerful` to the underlying resolution.
    pub fn init_from_pretrained(
        w_embed: &Tensor,
        b_embed: &Tensor,
        w_deembed: &Tensor,
        b_deembed: &Tensor,
        spec: &PatchSpec,
        c_in: usize,
    ) -> Result<Self, TokenizerError> {
        let p = spec.p_powerful;
        if w_embed.ndim() != 2 || w_deembed.ndim() != 2 {
            return Err(TokenizerError::Shape("pretrained weights must be matrices".into()));
        }
        let d = w_embed.shape()[1];
        let c_out = w_deembed.shape()[1] / (p * p);
        check_shape("w_embed", w_embed, &[c_in * p * p, d])?;
        check_shape("b_embed", b_embed, &[d])?;
        check_shape("w_deembed", w_deembed, &[d, c_out * p * p])?;
        check_shape("b_deembed", b_deembed, &[c_out * p * p])?;
        let mut fe = Self::zeros(spec, c_in, c_out, d)?;
        let pair = &fe.cache[&p];
        let qe_pinv = pair.embed.pseudo_inverse()?.kron_identity(c_in).to_tensor();
        let qd_pinv = pair.deembed.pseudo_inverse()?.kron_identity(c_out).to_tensor();
        fe.w_embed = matmul(&qe_pinv, w_embed)?;
        fe.b_embed = b_embed.clone();
        fe.w_deembed = matmul(w_deembed, &qd_pinv)?;
        fe.b_deembed = matmul(&b_deembed.reshaped(&[1, c_out * p * p])?, &qd_pinv)?.reshape(&[fe.b_deembed.numel()])?;
        Ok(fe)
    }

    pub fn projections(&self, p: usize) -> Result<&ProjectionPair, TokenizerError> {
        self.cache.get(&p).ok_or(TokenizerError::Unsupported(p))
    }

    /// Channel-blocked projections `(I_cin ⊗ Q_embed(p), I_cout ⊗ Q_deembed(p))`.
    pub fn kron_projections(&self, p: usize) -> Result<&(Tensor, Tensor), TokenizerError> {
        self.kron_cache.get(&p).ok_or(TokenizerError::Unsupported(p))
    }

    /// Patch-embedding weights `[c_in*p*p, d]` and bias for patch size `p`.
    pub fn instantiate_embed(&self, p: usize) -> Result<(Tensor, Tensor), TokenizerError> {
        self.spec.check_supported(p)?;
        if p == self.spec.p_underlying {
            return Ok((self.w_embed.clone(), self.b_embed.clone()));
        }
        let (qe, _) = self.kron_projections(p)?;
        Ok((matmul(qe, &self.w_embed)?, self.b_embed.clone()))
    }

    /// De-embedding weights `[d, c_out*p*p]` and bias for patch size `p`.
    pub fn instantiate_deembed(&self, p: usize) -> Result<(Tensor, Tensor), TokenizerError> {
        self.spec.check_supported(p)?;
        if p == self.spec.p_underlying {
            return Ok((self.w_deembed.clone(), self.b_deembed.clone()));
        }
        let (_, qd) = self.kron_projections(p)?;
        let n = self.c_out * p * p;
        let b = matmul(&self.b_deembed.reshaped(&[1, self.b_deembed.numel()])?, qd)?.reshape(&[n])?;
        Ok((matmul(&self.w_deembed, qd)?, b))
    }
}
