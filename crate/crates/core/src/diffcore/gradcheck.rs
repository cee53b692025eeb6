//! Finite-difference validation of analytic gradients.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Result of one gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOutcome {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the analytic gradient of a scalar-valued closure against
/// central differences `(f(x+h) - f(x-h)) / 2h`, element by element.
///
/// Relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
/// The closure must build its graph on the provided tape from the given
/// vars and return a scalar; anything else is an error.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckOutcome>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::NonScalarOutput {
            shape: tape.value(out).shape().to_vec(),
        });
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        if !t.value(o).is_scalar() {
            return Err(Error::NonScalarOutput {
                shape: t.value(o).shape().to_vec(),
            });
        }
        Ok(t.scalar(o))
    };

    let mut max_rel = 0.0f64;
    let mut workspace: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            let bump = |ws: &mut Vec<Tensor>, v: f64| {
                let mut data = inputs[i].data().to_vec();
                data[j] = v;
                ws[i] = Tensor::from_parts(inputs[i].shape().to_vec(), data);
            };
            bump(&mut workspace, orig + step);
            let f_plus = eval(&workspace)?;
            bump(&mut workspace, orig - step);
            let f_minus = eval(&workspace)?;
            workspace[i] = inputs[i].clone();

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[i][j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(GradCheckOutcome {
        max_rel_error: max_rel,
        tolerance,
        passed: max_rel <= tolerance,
    })
}
