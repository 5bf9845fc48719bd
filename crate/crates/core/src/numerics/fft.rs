//! Unitary 2-D DFT on power-of-two grids.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{NumericsError, Tensor};

/// Complex coefficient grid, row-major `[h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub h: usize,
    pub w: usize,
    pub coeffs: Vec<Complex64>,
}

impl Spectrum {
    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.coeffs[r * self.w + c]
    }

    pub fn sq_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }
}

fn check_dims(h: usize, w: usize) -> Result<(), NumericsError> {
    if h == 0 || w == 0 || !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(NumericsError::NotPowerOfTwo { h, w });
    }
    Ok(())
}

fn transform(h: usize, w: usize, buf: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
    let norm = 1.0 / ((h * w) as f64).sqrt();
    for v in buf.iter_mut() {
        *v *= norm;
    }
}

/// Forward DFT of a real `[h, w]` grid, scaled by `1/sqrt(h w)`.
pub fn fft2(x: &Tensor) -> Result<Spectrum, NumericsError> {
    if x.ndim() != 2 {
        return Err(NumericsError::ShapeMismatch { op: "fft2", detail: format!("expected [h,w], got {:?}", x.shape()) });
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    check_dims(h, w)?;
    let mut buf: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(h, w, &mut buf, false);
    Ok(Spectrum { h, w, coeffs: buf })
}

/// Inverse of [`fft2`]; returns the real part.
pub fn ifft2(s: &Spectrum) -> Result<Tensor, NumericsError> {
    check_dims(s.h, s.w)?;
    let mut buf = s.coeffs.clone();
    transform(s.h, s.w, &mut buf, true);
    Tensor::new(&[s.h, s.w], buf.iter().map(|c| c.re).collect())
}
