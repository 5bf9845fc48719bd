//! Dense tensors, reverse-mode autodiff and the linear algebra the model needs.

pub mod attention;
pub mod autodiff;
pub mod fft;
pub mod gradcheck;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use attention::{softmax_attention, SegmentMask};
pub use autodiff::{FlopCounter, FlopKind, Gradients, Tape, Var};
pub use fft::{fft2, ifft2, Spectrum};
pub use linalg::{pseudo_inverse, Matrix};
pub use rng::SplitRng;
pub use tensor::{matmul, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("attention mask mismatch: {0}")]
    MaskMismatch(String),
    #[error("SVD did not converge after {sweeps} sweeps")]
    SvdNoConvergence { sweeps: usize },
    #[error("fft2 needs power-of-two sides, got {h}x{w}")]
    NotPowerOfTwo { h: usize, w: usize },
    #[error("gradient check failed on input {input}[{index}]: analytic {analytic:e} vs numeric {numeric:e}")]
    GradCheck { input: usize, index: usize, analytic: f64, numeric: f64 },
}
