//! Central finite-difference verification of tape gradients. This is the
//! independent oracle everything differentiable is judged against: it never
//! touches the backward pass, only repeated forward evaluation in f64.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Relative disagreement with an absolute floor, so near-zero gradients are
/// compared absolutely instead of blowing up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks d(f)/d(x) for a scalar-valued tape function `f` against central
/// differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate. Returns
/// the worst relative error across all coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, TensorId) -> Result<TensorId>,
{
    let analytic = {
        let mut tape = Tape::recording();
        let xid = tape.leaf(x.clone());
        let loss = f(&mut tape, xid)?;
        tape.backward(loss)?;
        tape.grad(xid)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
    };
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(
        |xp| {
            let mut tape = Tape::inference();
            let xid = tape.leaf(xp.clone());
            let out = f(&mut tape, xid)?;
            tape.value(out).item()
        },
        x,
        &analytic,
        &coords,
        step,
    )
}

/// Finite-difference check restricted to chosen coordinates, against an
/// already-computed analytic gradient. `value` must evaluate the same scalar
/// function the analytic gradient came from.
pub fn grad_check_coords<V>(
    value: V,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    coords: &[usize],
    step: f64,
) -> Result<f64>
where
    V: Fn(&Tensor<f64>) -> Result<f64>,
{
    let mut worst = 0.0f64;
    for &i in coords {
        let mut xp = x.clone();
        xp.data_mut()[i] += step;
        let fp = value(&xp)?;
        let mut xm = x.clone();
        xm.data_mut()[i] -= step;
        let fm = value(&xm)?;
        let fd = (fp - fm) / (2.0 * step);
        worst = worst.max(rel_err(analytic.data()[i].to_f64(), fd));
    }
    Ok(worst)
}
