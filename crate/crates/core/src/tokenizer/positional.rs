use std::collections::BTreeMap;

use super::{build_resize_1d, TokenizerError};
use crate::numerics::Tensor;

/// Normalized patch centers are scaled onto this many units before the sinusoids.
pub const POS_REFERENCE_GRID: f64 = 16.0;

const MAX_PERIOD: f64 = 10_000.0;

/// 2-D sin/cos encoding at patch-center pixel coordinates normalized by the image size.
///
/// The first half of the channels encodes the row coordinate, the second the column.
pub fn positional_encoding(
    grid: (usize, usize),
    p: usize,
    img: (usize, usize),
    d: usize,
) -> Result<Tensor, TokenizerError> {
    if d == 0 || d % 4 != 0 {
        return Err(TokenizerError::Shape(format!("positional width {d} must be a positive multiple of 4")));
    }
    let (gh, gw) = grid;
    let (h, w) = img;
    let quarter = d / 4;
    let freqs: Vec<f64> = (0..quarter).map(|k| MAX_PERIOD.powf(-(k as f64) / quarter as f64)).collect();
    let mut out = Tensor::zeros(&[gh * gw, d]);
    let data = out.data_mut();
    for i in 0..gh {
        let py = POS_REFERENCE_GRID * (i as f64 + 0.5) * p as f64 / h as f64;
        for j in 0..gw {
            let px = POS_REFERENCE_GRID * (j as f64 + 0.5) * p as f64 / w as f64;
            let row = &mut data[(i * gw + j) * d..(i * gw + j + 1) * d];
            for (k, &f) in freqs.iter().enumerate() {
                row[k] = (py * f).sin();
                row[quarter + k] = (py * f).cos();
                row[2 * quarter + k] = (px * f).sin();
                row[3 * quarter + k] = (px * f).cos();
            }
        }
    }
    Ok(out)
}

/// Bilinear map `[gh*gw, gh0*gw0]` resampling a learned position table to another grid.
pub fn grid_resize(from: (usize, usize), to: (usize, usize)) -> Tensor {
    let ry = build_resize_1d(from.0, to.0);
    let rx = build_resize_1d(from.1, to.1);
    let cols = from.0 * from.1;
    Tensor::from_fn(&[to.0 * to.1, cols], |k| {
        let (r, c) = (k / cols, k % cols);
        ry.get(r / to.1, c / from.1) * rx.get(r % to.1, c % from.1)
    })
}

/// Per-patch-size vectors added to every token.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSizeTable {
    pub d: usize,
    pub entries: BTreeMap<usize, Tensor>,
    /// Size whose entry is pinned at zero and excluded from training.
    pub frozen_zero: Option<usize>,
}

impl PatchSizeTable {
    pub fn new(d: usize, sizes: &[usize], frozen_zero: Option<usize>) -> Self {
        let entries = sizes.iter().map(|&p| (p, Tensor::zeros(&[d]))).collect();
        Self { d, entries, frozen_zero }
    }

    pub fn lookup(&self, p: usize) -> Result<&Tensor, TokenizerError> {
        self.entries.get(&p).ok_or(TokenizerError::Unregistered(p))
    }

    pub fn is_trainable(&self, p: usize) -> bool {
        self.entries.contains_key(&p) && self.frozen_zero != Some(p)
    }
}
