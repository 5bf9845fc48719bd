//! Central finite-difference gradient checking.

use super::{NumericsError, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;
pub const FD_RTOL: f64 = 1e-3;
/// Absolute floor below which analytic and numeric values are both treated as zero.
pub const FD_ATOL: f64 = 1e-7;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Whether an analytic/numeric pair agrees at the standard tolerances.
pub fn grads_agree(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= FD_RTOL * analytic.abs().max(numeric.abs()) + FD_ATOL
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64, NumericsError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, NumericsError>,
{
    let tape = Tape::no_grad();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&tape, &vars)?.value().item())
}

/// Check every entry of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport, NumericsError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, NumericsError>,
{
    check_gradients_sampled(inputs, f, usize::MAX)
}

/// Check up to `max_per_input` evenly strided entries of each input.
pub fn check_gradients_sampled<F>(
    inputs: &[Tensor],
    f: F,
    max_per_input: usize,
) -> Result<GradCheckReport, NumericsError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, NumericsError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(*var);
        let n = inputs[which].numel();
        let stride = if n <= max_per_input { 1 } else { n.div_ceil(max_per_input) };
        for idx in (0..n).step_by(stride) {
            let orig = work[which].data()[idx];
            work[which].data_mut()[idx] = orig + FD_STEP;
            let up = eval(&work, &f)?;
            work[which].data_mut()[idx] = orig - FD_STEP;
            let down = eval(&work, &f)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[idx];
            report.checked += 1;
            let denom = a.abs().max(numeric.abs()).max(FD_ATOL);
            report.max_rel_err = report.max_rel_err.max((a - numeric).abs() / denom);
            if !grads_agree(a, numeric) {
                return Err(NumericsError::GradCheck { input: which, index: idx, analytic: a, numeric });
            }
        }
    }
    Ok(report)
}
