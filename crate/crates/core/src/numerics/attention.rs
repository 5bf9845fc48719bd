//! Multi-head softmax attention over block-diagonal segment layouts.

use super::tensor::gemm;
use super::{NumericsError, Tensor};

/// Block-diagonal attention mask as a list of contiguous segments.
///
/// Queries in segment `i` attend only to keys in segment `i`. Segment `i`
/// covers `q_lens[i]` query rows and `kv_lens[i]` key/value rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMask {
    q_lens: Vec<usize>,
    kv_lens: Vec<usize>,
}

impl SegmentMask {
    /// Self-attention segments.
    pub fn new(lens: Vec<usize>) -> Self {
        Self { kv_lens: lens.clone(), q_lens: lens }
    }

    /// Cross-attention segments with independent key lengths.
    pub fn cross(q_lens: Vec<usize>, kv_lens: Vec<usize>) -> Result<Self, NumericsError> {
        if q_lens.len() != kv_lens.len() {
            return Err(NumericsError::MaskMismatch(format!(
                "{} query segments vs {} key segments",
                q_lens.len(),
                kv_lens.len()
            )));
        }
        Ok(Self { q_lens, kv_lens })
    }

    pub fn full(n: usize) -> Self {
        Self::new(vec![n])
    }

    pub fn q_lens(&self) -> &[usize] {
        &self.q_lens
    }

    pub fn kv_lens(&self) -> &[usize] {
        &self.kv_lens
    }

    pub fn q_total(&self) -> usize {
        self.q_lens.iter().sum()
    }

    pub fn kv_total(&self) -> usize {
        self.kv_lens.iter().sum()
    }

    /// Multiply-add FLOPs of `QK^T` and `PV` summed over segments for hidden size `d`.
    pub fn flops(&self, d: usize) -> u64 {
        self.q_lens.iter().zip(&self.kv_lens).map(|(&q, &k)| 4 * (q * k * d) as u64).sum()
    }
}

/// Saved softmax probabilities, `[segment][head]` flattened `q_len x kv_len`.
pub(crate) struct AttentionCache {
    pub probs: Vec<Vec<f64>>,
}

fn check(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mask: &SegmentMask) -> Result<usize, NumericsError> {
    if q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 {
        return Err(NumericsError::ShapeMismatch {
            op: "attention",
            detail: format!("expected rank-2 q/k/v, got {:?} {:?} {:?}", q.shape(), k.shape(), v.shape()),
        });
    }
    let d = q.shape()[1];
    if heads == 0 || d % heads != 0 || k.shape()[1] != d || v.shape()[1] != d || k.shape()[0] != v.shape()[0] {
        return Err(NumericsError::ShapeMismatch {
            op: "attention",
            detail: format!("q {:?} k {:?} v {:?} heads {heads}", q.shape(), k.shape(), v.shape()),
        });
    }
    if mask.q_total() != q.shape()[0] || mask.kv_total() != k.shape()[0] {
        return Err(NumericsError::MaskMismatch(format!(
            "mask covers {}x{} rows, inputs have {}x{}",
            mask.q_total(),
            mask.kv_total(),
            q.shape()[0],
            k.shape()[0]
        )));
    }
    Ok(d / heads)
}

fn gather_head(src: &Tensor, row0: usize, rows: usize, h: usize, dh: usize) -> Vec<f64> {
    let d = src.shape()[1];
    let mut out = Vec::with_capacity(rows * dh);
    for r in row0..row0 + rows {
        out.extend_from_slice(&src.data()[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn scatter_head(dst: &mut [f64], d: usize, row0: usize, rows: usize, h: usize, dh: usize, src: &[f64]) {
    for r in 0..rows {
        let o = (row0 + r) * d + h * dh;
        for (slot, &val) in dst[o..o + dh].iter_mut().zip(&src[r * dh..(r + 1) * dh]) {
            *slot += val;
        }
    }
}

/// Forward pass on `[rows, heads*d_h]` layouts.
pub(crate) fn forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: &SegmentMask,
) -> Result<(Tensor, AttentionCache), NumericsError> {
    let dh = check(q, k, v, heads, mask)?;
    let d = q.shape()[1];
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.shape()[0] * d];
    let mut probs = Vec::with_capacity(mask.q_lens.len() * heads);
    let (mut q0, mut k0) = (0, 0);
    for (&nq, &nk) in mask.q_lens.iter().zip(&mask.kv_lens) {
        for h in 0..heads {
            if nq == 0 {
                probs.push(Vec::new());
                continue;
            }
            if nk == 0 {
                return Err(NumericsError::MaskMismatch("query segment with no keys".into()));
            }
            let qh = gather_head(q, q0, nq, h, dh);
            let kh = gather_head(k, k0, nk, h, dh);
            let vh = gather_head(v, k0, nk, h, dh);
            let mut p = vec![0.0; nq * nk];
            gemm(nq, dh, nk, &qh, false, &kh, true, &mut p, 0.0);
            for row in p.chunks_mut(nk) {
                let mut mx = f64::NEG_INFINITY;
                for s in row.iter_mut() {
                    *s *= scale;
                    mx = mx.max(*s);
                }
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
            }
            let mut oh = vec![0.0; nq * dh];
            gemm(nq, nk, dh, &p, false, &vh, false, &mut oh, 0.0);
            scatter_head(&mut out, d, q0, nq, h, dh, &oh);
            probs.push(p);
        }
        q0 += nq;
        k0 += nk;
    }
    Ok((Tensor::new(q.shape(), out)?, AttentionCache { probs }))
}

/// Gradients `(dq, dk, dv)`.
pub(crate) fn backward(
    grad: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: &SegmentMask,
    cache: &AttentionCache,
) -> (Tensor, Tensor, Tensor) {
    let d = q.shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.numel()];
    let mut dk = vec![0.0; k.numel()];
    let mut dv = vec![0.0; v.numel()];
    let (mut q0, mut k0) = (0, 0);
    let mut idx = 0;
    for (&nq, &nk) in mask.q_lens.iter().zip(&mask.kv_lens) {
        for h in 0..heads {
            let p = &cache.probs[idx];
            idx += 1;
            if nq == 0 {
                continue;
            }
            let qh = gather_head(q, q0, nq, h, dh);
            let kh = gather_head(k, k0, nk, h, dh);
            let vh = gather_head(v, k0, nk, h, dh);
            let goh = gather_head(grad, q0, nq, h, dh);
            // dV = P^T dO
            let mut dvh = vec![0.0; nk * dh];
            gemm(nk, nq, dh, p, true, &goh, false, &mut dvh, 0.0);
            // dP = dO V^T
            let mut dp = vec![0.0; nq * nk];
            gemm(nq, dh, nk, &goh, false, &vh, true, &mut dp, 0.0);
            for (prow, dprow) in p.chunks(nk).zip(dp.chunks_mut(nk)) {
                let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                for (g, &pv) in dprow.iter_mut().zip(prow) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            let mut dqh = vec![0.0; nq * dh];
            gemm(nq, nk, dh, &dp, false, &kh, false, &mut dqh, 0.0);
            let mut dkh = vec![0.0; nk * dh];
            gemm(nk, nq, dh, &dp, true, &qh, false, &mut dkh, 0.0);
            scatter_head(&mut dq, d, q0, nq, h, dh, &dqh);
            scatter_head(&mut dk, d, k0, nk, h, dh, &dkh);
            scatter_head(&mut dv, d, k0, nk, h, dh, &dvh);
        }
        q0 += nq;
        k0 += nk;
    }
    (
        Tensor::new(q.shape(), dq).expect("shape"),
        Tensor::new(k.shape(), dk).expect("shape"),
        Tensor::new(v.shape(), dv).expect("shape"),
    )
}

/// Softmax attention on `[heads, N, d_h]` tensors, optionally block-diagonal.
pub fn softmax_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&SegmentMask>,
) -> Result<Tensor, NumericsError> {
    if q.ndim() != 3 || k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "softmax_attention",
            detail: format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape()),
        });
    }
    let (heads, n, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let to_rows = |t: &Tensor| {
        let mut out = vec![0.0; n * heads * dh];
        for h in 0..heads {
            for i in 0..n {
                out[i * heads * dh + h * dh..i * heads * dh + (h + 1) * dh]
                    .copy_from_slice(&t.data()[(h * n + i) * dh..(h * n + i + 1) * dh]);
            }
        }
        Tensor::new(&[n, heads * dh], out).expect("shape")
    };
    let full = SegmentMask::full(n);
    let mask = mask.unwrap_or(&full);
    let (o, _) = forward(&to_rows(q), &to_rows(k), &to_rows(v), heads, mask)?;
    let mut out = vec![0.0; heads * n * dh];
    for h in 0..heads {
        for i in 0..n {
            out[(h * n + i) * dh..(h * n + i + 1) * dh]
                .copy_from_slice(&o.data()[i * heads * dh + h * dh..i * heads * dh + (h + 1) * dh]);
        }
    }
    Tensor::new(q.shape(), out)
}
