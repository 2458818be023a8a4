//! Finite-difference gradient checking.
//!
//! Compares the tape's analytic gradient of a scalar-valued function against
//! central differences, element by element. The relative error uses a small
//! denominator floor so that near-zero gradients are compared absolutely
//! instead of amplifying finite-difference noise.

use crate::error::{KvqError, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all checked elements.
    pub max_rel_err: f64,
    /// Largest absolute difference over all checked elements.
    pub max_abs_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    /// Number of elements compared.
    pub checked: usize,
    /// Whether every element satisfied the tolerance.
    pub passed: bool,
}

/// Denominator floor for the relative error: elements whose analytic and
/// numeric gradients are both far below this scale compare absolutely.
const REL_FLOOR: f64 = 1e-2;

pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Checks d f(x) / dx against central differences with step `h` at every
/// element of `x`; fails if any relative error exceeds `tol`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    check_elements(&f, x, h, tol, &all)
}

/// Like [`grad_check`] but only probes the given subset of flat indices —
/// used for expensive composite forwards where full sweeps are wasteful.
pub fn grad_check_sampled<F>(
    f: F,
    x: &Tensor,
    h: f64,
    tol: f64,
    elements: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    check_elements(&f, x, h, tol, elements)
}

fn check_elements<F>(f: &F, x: &Tensor, h: f64, tol: f64, elements: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    // Analytic gradient.
    let mut tape = Tape::new();
    let xid = tape.param(x.clone());
    let out = f(&mut tape, xid)?;
    if tape.data(out).len() != 1 {
        return Err(KvqError::contract("grad_check: function output must be scalar"));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(xid)
        .ok_or_else(|| KvqError::contract("grad_check: no gradient for input"))?
        .to_vec();

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xid = tape.leaf(Tensor::new(x.shape().to_vec(), data)?, false);
        let out = f(&mut tape, xid)?;
        tape.value(out).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        checked: 0,
        passed: true,
    };
    let base = x.data().to_vec();
    for &i in elements {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let re = rel_err(analytic[i], numeric);
        let ae = (analytic[i] - numeric).abs();
        if re > report.max_rel_err {
            report.max_rel_err = re;
            report.worst_index = i;
        }
        report.max_abs_err = report.max_abs_err.max(ae);
        report.checked += 1;
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}
