//! Synthetic class-conditioned images and the FXDT raw dataset format.

mod format;
mod synthetic;

pub use format::{normalize, parse_header, DatasetReader, Header, RawDataset, HEADER_LEN, MAGIC, VERSION};
pub use synthetic::{class_texture, generate, nearest_mean_accuracy, BlobParams, Family, SyntheticSpec};

use crate::numerics::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("bad magic {0:?}, expected FXDT")]
    Magic([u8; 4]),
    #[error("unsupported dataset version {found} (this build reads {supported})")]
    Version { found: u16, supported: u16 },
    #[error("corrupt header: {0}")]
    Header(String),
    #[error("truncated dataset: needed {needed} bytes at offset {offset}, file ends at {len}")]
    Truncated { offset: u64, needed: u64, len: u64 },
    #[error("linear probe accuracy {0:.3} is below 0.95")]
    NotSeparable(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One normalized example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `[c, h, w]` in `[-1, 1]`.
    pub x: Tensor,
    pub label: usize,
}
