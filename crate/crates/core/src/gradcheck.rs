//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is checking.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged by absolute error instead.
    pub floor: f64,
    /// Check at most this many coordinates per parameter (evenly strided).
    pub max_coords: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-6,
            floor: 1e-4,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    /// `(param index, coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `loss` with central differences.
///
/// `loss` receives a fresh tape and one leaf per parameter and must return
/// a scalar.
pub fn check<F>(params: &[Tensor], loss: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
    drop(tape);

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        let o = loss(&mut t, &vs)?;
        Ok(t.value(o).data()[0])
    };

    let mut work = params.to_vec();
    let mut report = GradcheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    for pi in 0..params.len() {
        let n = params[pi].len();
        let stride = match opts.max_coords {
            Some(c) if c > 0 && n > c => n.div_ceil(c),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + opts.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - opts.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[pi].data()[j], numeric, opts.floor);
            report.coords_checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (pi, j);
            }
        }
    }
    Ok(report)
}
