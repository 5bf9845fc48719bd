//! L2, SSIM, rank correlation and sample diversity.

use super::AnalysisError;
use crate::numerics::Tensor;

pub fn l2(a: &Tensor, b: &Tensor) -> Result<f64, AnalysisError> {
    if a.shape() != b.shape() {
        return Err(AnalysisError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.sub(b)?.norm())
}

const DATA_RANGE: f64 = 2.0;
const WINDOW: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParts {
    pub ssim: f64,
    /// Mean of `(s_xy + C3) / (s_x s_y + C3)` with `C3 = C2 / 2`.
    pub structure: f64,
}

/// Mean over channels and all stride-1 windows of side `min(8, h, w)`,
/// with `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`, `L = 2` for images in `[-1, 1]`.
pub fn ssim_parts(a: &Tensor, b: &Tensor) -> Result<SsimParts, AnalysisError> {
    if a.shape() != b.shape() || a.ndim() != 3 {
        return Err(AnalysisError::Shape(format!("ssim needs equal [c, h, w], got {:?} and {:?}", a.shape(), b.shape())));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let k = WINDOW.min(h).min(w);
    let (c1, c2) = ((0.01 * DATA_RANGE).powi(2), (0.03 * DATA_RANGE).powi(2));
    let c3 = c2 / 2.0;
    let n = (k * k) as f64;
    let (mut total, mut structure, mut count) = (0.0, 0.0, 0.0);
    for ch in 0..c {
        let off = ch * h * w;
        let at = |t: &Tensor, y: usize, x: usize| t.data()[off + y * w + x];
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        let (u, v) = (at(a, y, x), at(b, y, x));
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                // unbiased window statistics
                let va = (saa - n * ma * ma) / (n - 1.0);
                let vb = (sbb - n * mb * mb) / (n - 1.0);
                let cov = (sab - n * ma * mb) / (n - 1.0);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                structure += (cov + c3) / ((va.max(0.0) * vb.max(0.0)).sqrt() + c3);
                count += 1.0;
            }
        }
    }
    Ok(SsimParts { ssim: total / count, structure: structure / count })
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64, AnalysisError> {
    Ok(ssim_parts(a, b)?.ssim)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diversity {
    pub pairs: usize,
    pub mean_l2: f64,
    pub mean_ssim: f64,
}

/// Mean pairwise L2 and SSIM over a batch.
pub fn diversity(images: &[Tensor]) -> Result<Diversity, AnalysisError> {
    let (mut pairs, mut dl, mut ds) = (0usize, 0.0, 0.0);
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            dl += l2(&images[i], &images[j])?;
            ds += ssim(&images[i], &images[j])?;
            pairs += 1;
        }
    }
    let p = pairs.max(1) as f64;
    Ok(Diversity { pairs, mean_l2: dl / p, mean_ssim: ds / p })
}
