use super::{NumericsError, Tensor};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Thin singular value decomposition `a = u * diag(s) * v^T`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `[rows, k]`
    pub u: Matrix,
    /// Singular values, descending, length `k = min(rows, cols)`.
    pub s: Vec<f64>,
    /// `[cols, k]`
    pub v: Matrix,
    pub sweeps: usize,
}

pub const JACOBI_MAX_SWEEPS: usize = 100;
pub const JACOBI_TOL: f64 = 1e-12;
pub const PINV_RCOND: f64 = 1e-10;
pub const MAX_PINV_DIM: usize = 1024;

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "matrix",
                detail: format!("{rows}x{cols} with {} values", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, NumericsError> {
        if t.ndim() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matrix",
                detail: format!("expected rank-2 tensor, got {:?}", t.shape()),
            });
        }
        Self::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.rows, self.cols], self.data.clone()).expect("consistent matrix")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::ShapeMismatch {
                op: "matrix matmul",
                detail: format!("{}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        super::tensor::gemm(
            self.rows, self.cols, other.cols, &self.data, false, &other.data, false, &mut out.data, 0.0,
        );
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Block-diagonal `I_k ⊗ self`.
    pub fn kron_identity(&self, k: usize) -> Matrix {
        let (r, c) = (self.rows, self.cols);
        let mut out = Matrix::zeros(k * r, k * c);
        for b in 0..k {
            for i in 0..r {
                for j in 0..c {
                    out.data[(b * r + i) * (k * c) + b * c + j] = self.data[i * c + j];
                }
            }
        }
        out
    }

    /// One-sided Jacobi SVD.
    pub fn svd(&self) -> Result<Svd, NumericsError> {
        if !self.is_finite() {
            return Err(NumericsError::NonFinite { op: "svd" });
        }
        if self.rows < self.cols {
            let t = self.transpose().svd()?;
            return Ok(Svd { u: t.v, s: t.s, v: t.u, sweeps: t.sweeps });
        }
        let (m, n) = (self.rows, self.cols);
        // Work column-major: column j of `a` is a[j*m..(j+1)*m].
        let mut a = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                a[c * m + r] = self.data[r * n + c];
            }
        }
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        let mut sweeps = 0;
        let mut converged = n < 2;
        while !converged {
            if sweeps == JACOBI_MAX_SWEEPS {
                return Err(NumericsError::SvdNoConvergence { sweeps });
            }
            sweeps += 1;
            let mut off = 0.0_f64;
            for i in 0..n - 1 {
                for j in i + 1..n {
                    let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                    for r in 0..m {
                        let x = a[i * m + r];
                        let y = a[j * m + r];
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    if alpha == 0.0 || beta == 0.0 {
                        continue;
                    }
                    let rel = gamma.abs() / (alpha * beta).sqrt();
                    off = off.max(rel);
                    if rel <= JACOBI_TOL {
                        continue;
                    }
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for r in 0..m {
                        let x = a[i * m + r];
                        let y = a[j * m + r];
                        a[i * m + r] = c * x - s * y;
                        a[j * m + r] = s * x + c * y;
                    }
                    for r in 0..n {
                        let x = v[i * n + r];
                        let y = v[j * n + r];
                        v[i * n + r] = c * x - s * y;
                        v[j * n + r] = s * x + c * y;
                    }
                }
            }
            converged = off <= JACOBI_TOL;
        }
        let mut order: Vec<(usize, f64)> = (0..n)
            .map(|j| (j, a[j * m..(j + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt()))
            .collect();
        order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        let mut u = Matrix::zeros(m, n);
        let mut vm = Matrix::zeros(n, n);
        let mut s = Vec::with_capacity(n);
        for (k, &(j, sigma)) in order.iter().enumerate() {
            s.push(sigma);
            for r in 0..m {
                u.data[r * n + k] = if sigma > 0.0 { a[j * m + r] / sigma } else { 0.0 };
            }
            for r in 0..n {
                vm.data[r * n + k] = v[j * n + r];
            }
        }
        Ok(Svd { u, s, v: vm, sweeps })
    }

    /// Numerical rank with the pseudo-inverse truncation rule.
    pub fn rank(&self) -> Result<usize, NumericsError> {
        let svd = self.svd()?;
        let smax = svd.s.first().copied().unwrap_or(0.0);
        Ok(svd.s.iter().filter(|&&s| s > PINV_RCOND * smax && s > 0.0).count())
    }

    /// Moore–Penrose pseudo-inverse; singular values below `1e-10 * s_max` are dropped.
    pub fn pseudo_inverse(&self) -> Result<Matrix, NumericsError> {
        if self.rows > MAX_PINV_DIM || self.cols > MAX_PINV_DIM {
            return Err(NumericsError::ShapeMismatch {
                op: "pseudo_inverse",
                detail: format!("{}x{} exceeds {MAX_PINV_DIM}", self.rows, self.cols),
            });
        }
        let svd = self.svd()?;
        let smax = svd.s.first().copied().unwrap_or(0.0);
        let k = svd.s.len();
        let mut out = Matrix::zeros(self.cols, self.rows);
        for (idx, &sigma) in svd.s.iter().enumerate() {
            if sigma <= PINV_RCOND * smax || sigma == 0.0 {
                continue;
            }
            let inv = 1.0 / sigma;
            for r in 0..self.cols {
                let vr = svd.v.data[r * k + idx] * inv;
                if vr == 0.0 {
                    continue;
                }
                let row = &mut out.data[r * self.rows..(r + 1) * self.rows];
                for (c, slot) in row.iter_mut().enumerate() {
                    *slot += vr * svd.u.data[c * k + idx];
                }
            }
        }
        Ok(out)
    }
}

/// Pseudo-inverse of `m`.
pub fn pseudo_inverse(m: &Matrix) -> Result<Matrix, NumericsError> {
    m.pseudo_inverse()
}
