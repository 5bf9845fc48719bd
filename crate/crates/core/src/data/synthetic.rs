//! Deterministic toy images with class structure at coarse and fine scales.
//!
//! Every image is `background + shape + texture + noise` in `[0, 1]`, then
//! quantized to u8. The coarse shape depends on the family (a blob position,
//! a stripe orientation or a checker cell size); the fine texture is a
//! period-2 pattern chosen by the class.

use serde::{Deserialize, Serialize};

use super::{DataError, Example, RawDataset};
use crate::numerics::{SplitRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussianBlobs,
    Stripes,
    Checker,
}

impl std::str::FromStr for Family {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "gaussian-blobs" | "blobs" => Ok(Family::GaussianBlobs),
            "stripes" => Ok(Family::Stripes),
            "checker" => Ok(Family::Checker),
            other => Err(DataError::Spec(format!("unknown family {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub family: Family,
    pub count: usize,
    pub seed: u64,
    pub background: f64,
    /// Shape amplitude drawn uniformly from this range.
    pub amplitude: (f64, f64),
    /// Blob width in pixels.
    pub sigma: f64,
    /// Uniform positional jitter in pixels.
    pub jitter: f64,
    pub texture: f64,
    /// Uniform per-pixel noise half-width.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            height: 16,
            width: 16,
            channels: 1,
            family: Family::GaussianBlobs,
            count: 3000,
            seed: 0,
            background: 0.2,
            amplitude: (0.5, 0.6),
            sigma: 1.6,
            jitter: 1.0,
            texture: 0.08,
            noise: 0.02,
        }
    }
}

/// Mean blob of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobParams {
    /// Row, column of the center in pixel coordinates.
    pub center: (f64, f64),
    pub sigma: f64,
    pub amplitude: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes == 0 || self.height < 4 || self.width < 4 || self.channels == 0 {
            return Err(DataError::Spec(format!(
                "need >= 1 class and images of at least 4x4 with >= 1 channel, got {} classes {}x{}x{}",
                self.num_classes, self.channels, self.height, self.width
            )));
        }
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(DataError::Spec("image sides must be even".into()));
        }
        let hi = self.background + self.amplitude.1 + self.texture + self.noise;
        let lo = self.background - self.texture - self.noise;
        if !(self.amplitude.0 <= self.amplitude.1 && lo >= 0.0 && hi <= 1.0 && self.sigma > 0.0 && self.jitter >= 0.0) {
            return Err(DataError::Spec("intensity ranges leave [0, 1] or are inverted".into()));
        }
        Ok(())
    }

    /// Classes sit on a circle around the image center.
    pub fn blob(&self, class: usize) -> BlobParams {
        let (cy, cx) = ((self.height as f64 - 1.0) / 2.0, (self.width as f64 - 1.0) / 2.0);
        let r = 0.22 * self.height.min(self.width) as f64;
        let a = std::f64::consts::TAU * class as f64 / self.num_classes as f64;
        BlobParams {
            center: (cy + r * a.sin(), cx + r * a.cos()),
            sigma: self.sigma,
            amplitude: 0.5 * (self.amplitude.0 + self.amplitude.1),
        }
    }
}

/// Zero-mean period-2 pattern of a class, unit amplitude.
pub fn class_texture(class: usize, y: usize, x: usize) -> f64 {
    let s = |v: usize| if v % 2 == 0 { 1.0 } else { -1.0 };
    match class % 4 {
        0 => s(y),
        1 => s(x),
        2 => s(x + y),
        _ => -s(x + y),
    }
}

fn shape_value(spec: &SyntheticSpec, class: usize, y: f64, x: f64, shift: (f64, f64)) -> f64 {
    let k = spec.num_classes as f64;
    match spec.family {
        Family::GaussianBlobs => {
            let b = spec.blob(class);
            let (dy, dx) = (y - b.center.0 - shift.0, x - b.center.1 - shift.1);
            (-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma)).exp()
        }
        Family::Stripes => {
            let theta = std::f64::consts::PI * class as f64 / k;
            let u = x * theta.cos() + y * theta.sin();
            0.5 + 0.5 * (std::f64::consts::TAU * (u + shift.0) / 8.0).cos()
        }
        Family::Checker => {
            let cell = (2 + class) as f64;
            let (a, b) = (((y + 0.5 * shift.0) / cell).floor() as i64, ((x + 0.5 * shift.1) / cell).floor() as i64);
            if (a + b).rem_euclid(2) == 0 { 1.0 } else { 0.0 }
        }
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<RawDataset, DataError> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut pixels = Vec::with_capacity(spec.count * h * w * c);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = SplitRng::stream(spec.seed, i as u64);
        let class = i % spec.num_classes;
        let amp = spec.amplitude.0 + (spec.amplitude.1 - spec.amplitude.0) * rng.uniform();
        let shift = (spec.jitter * (2.0 * rng.uniform() - 1.0), spec.jitter * (2.0 * rng.uniform() - 1.0));
        for ch in 0..c {
            let tint = 1.0 - 0.25 * ((ch + class) % c) as f64 / c as f64;
            for y in 0..h {
                for x in 0..w {
                    let v = spec.background
                        + amp * tint * shape_value(spec, class, y as f64, x as f64, shift)
                        + spec.texture * class_texture(class, y, x)
                        + spec.noise * (2.0 * rng.uniform() - 1.0);
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        labels.push(class as u32);
    }
    let data = RawDataset { height: h, width: w, channels: c, pixels, labels: Some(labels) };
    if spec.count >= 4 * spec.num_classes {
        let acc = nearest_mean_accuracy(&data.examples(), spec.num_classes);
        if acc <= 0.95 {
            return Err(DataError::NotSeparable(acc));
        }
    }
    Ok(data)
}

/// Held-out accuracy of a nearest-class-mean classifier fit on the even-indexed half.
pub fn nearest_mean_accuracy(examples: &[Example], num_classes: usize) -> f64 {
    let Some(first) = examples.first() else { return 1.0 };
    let n = first.x.numel();
    let mut sums = vec![vec![0.0; n]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for e in examples.iter().step_by(2) {
        counts[e.label] += 1;
        for (s, v) in sums[e.label].iter_mut().zip(e.x.data()) {
            *s += v;
        }
    }
    let means: Vec<Tensor> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| Tensor::from_vec(s).scale(1.0 / c.max(1) as f64))
        .collect();
    let (mut right, mut total) = (0usize, 0usize);
    for e in examples.iter().skip(1).step_by(2) {
        let x = e.x.reshaped(&[n]).expect("flat");
        let guess = (0..num_classes)
            .min_by(|&a, &b| x.sub(&means[a]).unwrap().sq_norm().total_cmp(&x.sub(&means[b]).unwrap().sq_norm()))
            .expect("at least one class");
        right += usize::from(guess == e.label);
        total += 1;
    }
    right as f64 / total.max(1) as f64
}
