//! Finite-difference verification of tape gradients.

use crate::error::Result;
use crate::params::ParameterSet;
use crate::tape::{Gradients, Tape, Var};

/// Relative error used by [`grad_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between the tape gradient of the scalar built by
/// `f` and a numerical derivative, over every value of every parameter in
/// `params`.
///
/// The numerical side uses the fourth-order five-point stencil
/// `(-f(x+2s) + 8f(x+s) - 8f(x-s) + f(x-2s)) / 12s`. Its truncation error
/// falls as `s⁴`, so a step near `1e-3` keeps both truncation and rounding
/// noise around `1e-12`, well below the size of the small gradients deep
/// attention weights see.
pub fn grad_check<F>(params: &ParameterSet, step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut grads = Gradients::zeros_like(params);
    {
        let mut tape = Tape::new(params);
        let out = f(&mut tape)?;
        tape.backward(out, 1.0, &mut grads);
    }

    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut tape = Tape::new(p);
        let out = f(&mut tape)?;
        Ok(tape.value(out).item())
    };

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for id in 0..params.len() {
        for k in 0..params.tensor(id).len() {
            let original = params.tensor(id).data()[k];
            let mut at = |offset: f64| -> Result<f64> {
                work.tensor_mut(id).data_mut()[k] = original + offset;
                eval(&work)
            };
            let (p2, p1) = (at(2.0 * step)?, at(step)?);
            let (m1, m2) = (at(-step)?, at(-2.0 * step)?);
            work.tensor_mut(id).data_mut()[k] = original;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * step);
            worst = worst.max(relative_error(grads.get(id).data()[k], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_scalar_function_is_exact() {
        let mut p = ParameterSet::new();
        p.push(
            "x",
            Tensor::new(vec![1, 3], vec![0.5, -1.5, 2.0]).unwrap(),
            false,
        )
        .unwrap();
        p.push(
            "w",
            Tensor::new(vec![1, 3], vec![1.0, 2.0, -3.0]).unwrap(),
            false,
        )
        .unwrap();
        let err = grad_check(&p, 1e-3, |tape| {
            let (x, w) = (tape.param(0), tape.param(1));
            let x2 = tape.scale(x, 4.0);
            tape.linear(x2, w, None)
        })
        .unwrap();
        // bilinear in (x, w): the stencil is exact up to rounding
        assert!(err < 1e-8, "{err}");
    }
}
