//! Radial low/high-pass masks on the 2-D DFT.

use super::AnalysisError;
use crate::numerics::{fft2, ifft2, Spectrum, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterKind {
    Low,
    High,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandFilter {
    pub kind: FilterKind,
    /// Radius as a fraction of the Nyquist frequency, in `(0, 1]`.
    pub cutoff: f64,
}

impl std::str::FromStr for BandFilter {
    type Err = AnalysisError;

    /// `low:0.5`, `high:0.25` or `all`.
    fn from_str(s: &str) -> Result<Self, AnalysisError> {
        if s == "all" {
            return Ok(Self::all());
        }
        let (kind, c) = s.split_once(':').ok_or_else(|| AnalysisError::Filter(format!("expected kind:cutoff, got {s:?}")))?;
        let cutoff: f64 = c.parse().map_err(|_| AnalysisError::Filter(format!("bad cutoff {c:?}")))?;
        match kind {
            "low" => Self::low(cutoff),
            "high" => Self::high(cutoff),
            _ => Err(AnalysisError::Filter(format!("unknown filter kind {kind:?}"))),
        }
    }
}

impl BandFilter {
    pub fn all() -> Self {
        Self { kind: FilterKind::All, cutoff: 1.0 }
    }

    pub fn low(cutoff: f64) -> Result<Self, AnalysisError> {
        Self::checked(FilterKind::Low, cutoff)
    }

    pub fn high(cutoff: f64) -> Result<Self, AnalysisError> {
        Self::checked(FilterKind::High, cutoff)
    }

    fn checked(kind: FilterKind, cutoff: f64) -> Result<Self, AnalysisError> {
        if !(cutoff > 0.0 && cutoff <= 1.0) {
            return Err(AnalysisError::Filter(format!("cutoff {cutoff} outside (0, 1]")));
        }
        Ok(Self { kind, cutoff })
    }

    /// The complementary filter with the same cutoff.
    pub fn complement(&self) -> Self {
        let kind = match self.kind {
            FilterKind::Low => FilterKind::High,
            FilterKind::High => FilterKind::Low,
            FilterKind::All => FilterKind::All,
        };
        Self { kind, ..*self }
    }

    /// Whether coefficient `(r, c)` of an `h x w` grid passes.
    pub fn passes(&self, h: usize, w: usize, r: usize, c: usize) -> bool {
        let signed = |k: usize, n: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        let fy = signed(r, h) / (h as f64 / 2.0);
        let fx = signed(c, w) / (w as f64 / 2.0);
        let inside = (fy * fy + fx * fx).sqrt() <= self.cutoff;
        match self.kind {
            FilterKind::Low => inside,
            FilterKind::High => !inside,
            FilterKind::All => true,
        }
    }

    /// Zero every coefficient that does not pass.
    pub fn apply_spectrum(&self, s: &Spectrum) -> Spectrum {
        let mut out = s.clone();
        for r in 0..s.h {
            for c in 0..s.w {
                if !self.passes(s.h, s.w, r, c) {
                    out.coeffs[r * s.w + c] = Default::default();
                }
            }
        }
        out
    }

    /// Filter every channel of `[c, h, w]`. The all-pass filter returns the input unchanged.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor, AnalysisError> {
        if self.kind == FilterKind::All {
            return Ok(x.clone());
        }
        if x.ndim() != 3 {
            return Err(AnalysisError::Shape(format!("filter expects [c, h, w], got {:?}", x.shape())));
        }
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let mut out = Vec::with_capacity(x.numel());
        for ch in x.unstack() {
            let s = self.apply_spectrum(&fft2(&ch)?);
            out.extend_from_slice(ifft2(&s)?.data());
        }
        Ok(Tensor::new(&[x.shape()[0], h, w], out)?)
    }
}
