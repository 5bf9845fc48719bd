//! Binary PGM (one channel) and PPM (three channels) output.

use std::path::Path;

use crate::numerics::Tensor;

/// `round((x + 1) * 127.5)` clamped to `[0, 255]`.
pub fn quantize(x: f64) -> u8 {
    if x.is_nan() {
        return 0;
    }
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Encode `[c, h, w]` with `c` 1 or 3.
pub fn encode(x: &Tensor) -> Result<Vec<u8>, String> {
    let s = x.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(format!("image must be [1|3, h, w], got {s:?}"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                out.push(quantize(x.data()[(ch * h + y) * w + xx]));
            }
        }
    }
    Ok(out)
}

pub fn extension(x: &Tensor) -> &'static str {
    if x.shape().first() == Some(&3) {
        "ppm"
    } else {
        "pgm"
    }
}

pub fn write(path: &Path, x: &Tensor) -> std::io::Result<()> {
    let bytes = encode(x).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;
    std::fs::write(path, bytes)
}

/// `(a - b) / 2`, so a full-range difference maps onto the full gray scale.
pub fn difference(a: &Tensor, b: &Tensor) -> Option<Tensor> {
    a.zip_map(b, |u, v| (u - v) / 2.0).ok()
}
