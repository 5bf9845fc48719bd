//! Fine-tuning a pretrained model into a multi-patch-size model.
//!
//! Shared mode trains every patch size through one set of weights with the
//! epsilon loss, optionally plus a bootstrapped distribution-matching term.
//! LoRA mode distills the frozen powerful model into adapters of the weak sizes.

mod bootstrap;
mod mmd;
mod train;

pub use bootstrap::{bootstrap_chain, bootstrap_mmd_loss, BootstrapDraw, BootstrapSchedule};
pub use mmd::{mmd2, mmd2_jackknife, mmd2_var, RbfMixture, MEDIAN_MULTIPLIERS};
pub use train::{distill_objective, Metrics, Objective, TrainConfig, Trainer};

use crate::backbone::BackboneError;
use crate::diffusion::DiffusionError;
use crate::numerics::{NumericsError, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("mmd: {0}")]
    Mmd(String),
    #[error("bootstrap: {0}")]
    Bootstrap(String),
    #[error("frozen tensor {0} changed during training")]
    FrozenMutated(String),
    #[error("empty dataset")]
    NoData,
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Batch mean of `|teacher - student|_2`. The teacher side is plain data, so no
/// gradient can reach whatever produced it.
pub fn distill_loss<'t>(tape: &'t Tape, teacher: &[Tensor], student: &[Var<'t>]) -> Result<Var<'t>, TrainError> {
    if teacher.is_empty() || teacher.len() != student.len() {
        return Err(TrainError::Config(format!("{} teacher vs {} student predictions", teacher.len(), student.len())));
    }
    let mut total: Option<Var<'t>> = None;
    for (t, s) in teacher.iter().zip(student) {
        let n = t.numel();
        let s = s.reshape(&[1, s.value().numel()])?;
        if s.shape()[1] != n {
            return Err(TrainError::Config(format!("prediction sizes {} vs {n}", s.shape()[1])));
        }
        let d = s.sub(&tape.constant(t.reshaped(&[1, n])?))?.square()?.sum()?.sqrt()?;
        total = Some(match total {
            None => d,
            Some(acc) => acc.add(&d)?,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / teacher.len() as f64)?)
}

/// Plain-value [`distill_loss`].
pub fn distill_value(teacher: &[Tensor], student: &[Tensor]) -> Result<f64, TrainError> {
    if teacher.is_empty() || teacher.len() != student.len() {
        return Err(TrainError::Config(format!("{} teacher vs {} student predictions", teacher.len(), student.len())));
    }
    let mut total = 0.0;
    for (t, s) in teacher.iter().zip(student) {
        total += t.sub(s)?.sq_norm().sqrt();
    }
    Ok(total / teacher.len() as f64)
}
