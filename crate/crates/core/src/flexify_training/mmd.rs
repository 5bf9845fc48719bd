//! Maximum mean discrepancy with a mixture of RBF kernels.

use super::TrainError;
use crate::numerics::{Tensor, Var};

/// `k(x, y) = mean_b exp(-|x - y|^2 / h_b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfMixture {
    pub bandwidths: Vec<f64>,
}

/// Multipliers applied to the median squared distance.
pub const MEDIAN_MULTIPLIERS: [f64; 3] = [0.5, 1.0, 2.0];

impl RbfMixture {
    /// Median of the pooled pairwise squared distances times each multiplier.
    pub fn median_heuristic(xs: &Tensor, ys: &Tensor, multipliers: &[f64]) -> Result<Self, TrainError> {
        let rows: Vec<&[f64]> = (0..xs.rows()).map(|i| xs.row(i)).chain((0..ys.rows()).map(|i| ys.row(i))).collect();
        let n = rows.len();
        let mut d = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                d.push(sq_dist(rows[i], rows[j]));
            }
        }
        let med = if d.is_empty() {
            1.0
        } else {
            let mid = d.len() / 2;
            *d.select_nth_unstable_by(mid, f64::total_cmp).1
        };
        let med = if med > 0.0 { med } else { 1.0 };
        Ok(Self { bandwidths: multipliers.iter().map(|m| m * med).collect() })
    }

    pub fn eval(&self, d2: f64) -> f64 {
        self.bandwidths.iter().map(|h| (-d2 / h).exp()).sum::<f64>() / self.bandwidths.len() as f64
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_sets(xs: &Tensor, ys: &Tensor, biased: bool) -> Result<(usize, usize), TrainError> {
    if xs.ndim() != 2 || ys.ndim() != 2 || xs.shape()[1] != ys.shape()[1] {
        return Err(TrainError::Mmd(format!("sample sets {:?} and {:?} must be [n, D] with equal D", xs.shape(), ys.shape())));
    }
    let (n, m) = (xs.shape()[0], ys.shape()[0]);
    let min = if biased { 1 } else { 2 };
    if n < min || m < min {
        return Err(TrainError::Mmd(format!("need at least {min} samples per set, got {n} and {m}")));
    }
    Ok((n, m))
}

/// Kernel matrix between rows of `a` and rows of `b`.
fn gram(a: &Tensor, b: &Tensor, k: &RbfMixture) -> Vec<f64> {
    let (n, m) = (a.shape()[0], b.shape()[0]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = k.eval(sq_dist(a.row(i), b.row(j)));
        }
    }
    out
}

/// Squared MMD between row sets: the unbiased U-statistic, or the V-statistic when `biased`.
pub fn mmd2(xs: &Tensor, ys: &Tensor, k: &RbfMixture, biased: bool) -> Result<f64, TrainError> {
    let (n, m) = check_sets(xs, ys, biased)?;
    let (kxx, kyy, kxy) = (gram(xs, xs, k), gram(ys, ys, k), gram(xs, ys, k));
    let off = |g: &[f64], s: usize| g.iter().sum::<f64>() - (0..s).map(|i| g[i * s + i]).sum::<f64>();
    let cross = kxy.iter().sum::<f64>() / (n * m) as f64;
    Ok(if biased {
        kxx.iter().sum::<f64>() / (n * n) as f64 + kyy.iter().sum::<f64>() / (m * m) as f64 - 2.0 * cross
    } else {
        off(&kxx, n) / (n * (n - 1)) as f64 + off(&kyy, m) / (m * (m - 1)) as f64 - 2.0 * cross
    })
}

/// Unbiased estimate and its leave-one-pair-out jackknife standard error. Needs equal set sizes.
pub fn mmd2_jackknife(xs: &Tensor, ys: &Tensor, k: &RbfMixture) -> Result<(f64, f64), TrainError> {
    let (n, m) = check_sets(xs, ys, false)?;
    if n != m || n < 3 {
        return Err(TrainError::Mmd(format!("jackknife needs equal sets of at least 3, got {n} and {m}")));
    }
    let (kxx, kyy, kxy) = (gram(xs, xs, k), gram(ys, ys, k), gram(xs, ys, k));
    let row = |g: &[f64], i: usize| g[i * n..(i + 1) * n].iter().sum::<f64>();
    let col = |g: &[f64], j: usize| (0..n).map(|i| g[i * n + j]).sum::<f64>();
    let diag = |g: &[f64]| (0..n).map(|i| g[i * n + i]).sum::<f64>();
    let a = kxx.iter().sum::<f64>() - diag(&kxx);
    let b = kyy.iter().sum::<f64>() - diag(&kyy);
    let c = kxy.iter().sum::<f64>();
    let nf = n as f64;
    let full = a / (nf * (nf - 1.0)) + b / (nf * (nf - 1.0)) - 2.0 * c / (nf * nf);
    let loo: Vec<f64> = (0..n)
        .map(|i| {
            let ai = a - 2.0 * (row(&kxx, i) - kxx[i * n + i]);
            let bi = b - 2.0 * (row(&kyy, i) - kyy[i * n + i]);
            let ci = c - row(&kxy, i) - col(&kxy, i) + kxy[i * n + i];
            let r = nf - 1.0;
            ai / (r * (r - 1.0)) + bi / (r * (r - 1.0)) - 2.0 * ci / (r * r)
        })
        .collect();
    let mean = loo.iter().sum::<f64>() / nf;
    let var = (nf - 1.0) / nf * loo.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    Ok((full, var.sqrt()))
}

/// Differentiable unbiased MMD between `[n, D]` rows.
pub fn mmd2_var<'t>(xs: &Var<'t>, ys: &Var<'t>, k: &RbfMixture) -> Result<Var<'t>, TrainError> {
    let (n, m) = check_sets(&xs.value(), &ys.value(), false)?;
    let kernel = |d: Var<'t>| -> Result<Var<'t>, TrainError> {
        let mut acc: Option<Var<'t>> = None;
        for h in &k.bandwidths {
            let e = d.scale(-1.0 / h)?.exp()?;
            acc = Some(match acc {
                None => e,
                Some(a) => a.add(&e)?,
            });
        }
        Ok(acc.expect("at least one bandwidth").scale(1.0 / k.bandwidths.len() as f64)?)
    };
    // diagonal distances are exactly zero, so every diagonal kernel entry is exactly one
    let sxx = kernel(xs.pairwise_sq_dists(xs)?)?.sum()?.add_scalar(-(n as f64))?;
    let syy = kernel(ys.pairwise_sq_dists(ys)?)?.sum()?.add_scalar(-(m as f64))?;
    let sxy = kernel(xs.pairwise_sq_dists(ys)?)?.sum()?;
    Ok(sxx
        .scale(1.0 / (n * (n - 1)) as f64)?
        .add(&syy.scale(1.0 / (m * (m - 1)) as f64)?)?
        .sub(&sxy.scale(2.0 / (n * m) as f64)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use crate::numerics::{SplitRng, Tape};

    fn brute(xs: &Tensor, ys: &Tensor, k: &RbfMixture) -> f64 {
        let (n, m) = (xs.shape()[0], ys.shape()[0]);
        let kf = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
            k.bandwidths.iter().map(|h| (-d / h).exp()).sum::<f64>() / k.bandwidths.len() as f64
        };
        let mut sxx = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sxx += kf(xs.row(i), xs.row(j));
                }
            }
        }
        let mut syy = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    syy += kf(ys.row(i), ys.row(j));
                }
            }
        }
        let mut sxy = 0.0;
        for i in 0..n {
            for j in 0..m {
                sxy += kf(xs.row(i), ys.row(j));
            }
        }
        sxx / (n * (n - 1)) as f64 + syy / (m * (m - 1)) as f64 - 2.0 * sxy / (n * m) as f64
    }

    #[test]
    fn biased_is_zero_on_identical_sets() {
        let xs = SplitRng::new(1).normal_tensor(&[20, 3]);
        let k = RbfMixture::median_heuristic(&xs, &xs, &MEDIAN_MULTIPLIERS).unwrap();
        assert!(mmd2(&xs, &xs, &k, true).unwrap().abs() < 1e-15);
        assert!(mmd2(&xs.reshaped(&[20, 3]).unwrap(), &SplitRng::new(2).normal_tensor(&[1, 3]), &k, false).is_err());
    }

    #[test]
    fn unbiased_matches_double_sum() {
        let mut rng = SplitRng::new(3);
        for (n, m, dim) in [(2, 2, 1), (64, 64, 4), (17, 40, 7)] {
            let xs = rng.normal_tensor(&[n, dim]);
            let ys = rng.normal_tensor(&[m, dim]).map(|v| v + 0.3);
            let k = RbfMixture::median_heuristic(&xs, &ys, &MEDIAN_MULTIPLIERS).unwrap();
            let want = brute(&xs, &ys, &k);
            assert!((mmd2(&xs, &ys, &k, false).unwrap() - want).abs() < 1e-12);
            let tape = Tape::new();
            let v = mmd2_var(&tape.constant(xs.clone()), &tape.constant(ys.clone()), &k).unwrap();
            assert!((v.value().item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn jackknife_matches_explicit_leave_one_out() {
        let mut rng = SplitRng::new(4);
        let xs = rng.normal_tensor(&[9, 2]);
        let ys = rng.normal_tensor(&[9, 2]);
        let k = RbfMixture { bandwidths: vec![1.0, 3.0] };
        let (full, se) = mmd2_jackknife(&xs, &ys, &k).unwrap();
        assert!((full - brute(&xs, &ys, &k)).abs() < 1e-12);
        let drop = |t: &Tensor, i: usize| {
            let rows: Vec<f64> = (0..9).filter(|&r| r != i).flat_map(|r| t.row(r).to_vec()).collect();
            Tensor::new(&[8, 2], rows).unwrap()
        };
        let loo: Vec<f64> = (0..9).map(|i| brute(&drop(&xs, i), &drop(&ys, i), &k)).collect();
        let mean = loo.iter().sum::<f64>() / 9.0;
        let want = (8.0 / 9.0 * loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sqrt();
        assert!((se - want).abs() < 1e-12);
    }

    #[test]
    fn two_sample_behaviour() {
        let mut rng = SplitRng::new(5);
        let xs = rng.normal_tensor(&[500, 1]);
        let same = rng.normal_tensor(&[500, 1]);
        let shifted = rng.normal_tensor(&[500, 1]).map(|v| v + 1.0);
        let k = RbfMixture::median_heuristic(&xs, &same, &MEDIAN_MULTIPLIERS).unwrap();
        let (v, se) = mmd2_jackknife(&xs, &same, &k).unwrap();
        assert!(v.abs() < 3.0 * se, "{v} vs se {se}");
        let k = RbfMixture::median_heuristic(&xs, &shifted, &MEDIAN_MULTIPLIERS).unwrap();
        let (v, se) = mmd2_jackknife(&xs, &shifted, &k).unwrap();
        assert!(v > 5.0 * se, "{v} vs se {se}");
    }

    #[test]
    fn differentiable_estimator_gradients() {
        let mut rng = SplitRng::new(6);
        let xs = rng.normal_tensor(&[5, 3]);
        let ys = rng.normal_tensor(&[4, 3]);
        let k = RbfMixture::median_heuristic(&xs, &ys, &MEDIAN_MULTIPLIERS).unwrap();
        check_gradients(&[xs, ys], |_, v| mmd2_var(&v[0], &v[1], &k).map_err(|e| match e {
            TrainError::Numerics(n) => n,
            other => panic!("{other}"),
        }))
        .unwrap();
    }
}
