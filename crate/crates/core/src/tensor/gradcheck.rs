//! Numerical gradient checking against central finite differences.
//!
//! The numeric side never touches a backward pass: it re-evaluates the
//! forward function at perturbed inputs, so it stays an independent check
//! of every analytic gradient.

use super::{Tape, Tensor};
use crate::error::Result;

/// One input to a checked function: raw values plus shape.
#[derive(Clone)]
pub struct CheckInput {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl CheckInput {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        CheckInput {
            data,
            shape: shape.to_vec(),
        }
    }
}

/// Worst observed deviation between analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_elem: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with a floor so that near-zero gradients compare on an
/// absolute scale (~1e-8 resolvable at h = 1e-5 in f64).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn eval(
    f: &impl Fn(&Tape, &[Tensor]) -> Result<Tensor>,
    inputs: &[CheckInput],
    grad: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|inp| tape.leaf(inp.data.clone(), &inp.shape, grad))
        .collect::<Result<_>>()?;
    let out = f(&tape, &leaves)?;
    let value = out.item();
    if grad {
        out.backward()?;
        let grads = leaves.iter().map(|l| l.grad()).collect();
        Ok((value, grads))
    } else {
        Ok((value, Vec::new()))
    }
}

/// Compare analytic gradients of a scalar-valued graph builder against
/// central finite differences for every element of every input.
pub fn check(
    f: impl Fn(&Tape, &[Tensor]) -> Result<Tensor>,
    inputs: &[CheckInput],
    h: f64,
) -> Result<GradReport> {
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, inp)| (0..inp.data.len()).map(move |j| (i, j)))
        .collect();
    check_sampled(f, inputs, h, &all)
}

/// Same as [`check`] but restricted to the given (input, element) pairs;
/// used when a full sweep would be too slow (e.g. a whole model).
pub fn check_sampled(
    f: impl Fn(&Tape, &[Tensor]) -> Result<Tensor>,
    inputs: &[CheckInput],
    h: f64,
    elems: &[(usize, usize)],
) -> Result<GradReport> {
    let (_, analytic) = eval(&f, inputs, true)?;
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_elem: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<CheckInput> = inputs.to_vec();
    for &(i, j) in elems {
        let orig = work[i].data[j];
        work[i].data[j] = orig + h;
        let (fp, _) = eval(&f, &work, false)?;
        work[i].data[j] = orig - h;
        let (fm, _) = eval(&f, &work, false)?;
        work[i].data[j] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i][j];
        let e = rel_err(a, numeric);
        if e > report.max_rel_err {
            report = GradReport {
                max_rel_err: e,
                worst_input: i,
                worst_elem: j,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}
