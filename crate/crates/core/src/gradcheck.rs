//! Central finite-difference checks of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|a - n| / max(floor, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Gradient magnitude below which central differences cannot resolve a
/// relative error: loss round-off divided by the step is already of this
/// order, so smaller entries are compared on this absolute scale instead.
pub fn resolution_floor(loss: f64) -> f64 {
    f64::EPSILON.sqrt() * loss.abs().max(1.0)
}

/// Worst relative error per input tensor, plus the overall maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub per_input: Vec<f64>,
    pub max: f64,
}

/// Checks a scalar function of one tensor. Returns the max relative error.
pub fn gradcheck<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = gradcheck_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), eps, false)?;
    Ok(report.max)
}

/// Checks a scalar function of several tensors at once.
///
/// `faulty_backward` is forwarded to [`Tape::inject_backward_fault`] for the
/// analytic pass only; it exists for negative-control tests.
pub fn gradcheck_many<F>(f: F, points: &[Tensor], eps: f64, faulty_backward: bool) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    if faulty_backward {
        tape.inject_backward_fault();
    }
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let floor = resolution_floor(tape.value(loss)?.item()?);
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect::<Result<_>>()?;

    let evaluate = |pts: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = pts.iter().map(|p| t.constant(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        t.value(l)?.item()
    };

    let mut per_input = Vec::with_capacity(points.len());
    let mut work: Vec<Tensor> = points.to_vec();
    for (k, point) in points.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..point.numel() {
            let x = point.data()[j];
            work[k].data_mut()[j] = x + eps;
            let plus = evaluate(&work)?;
            work[k].data_mut()[j] = x - eps;
            let minus = evaluate(&work)?;
            work[k].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite { op: "gradcheck" });
            }
            worst = worst.max(relative_error(analytic[k].data()[j], numeric, floor));
        }
        per_input.push(worst);
    }
    let max = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradcheckReport { per_input, max })
}
