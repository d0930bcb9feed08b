use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{usage, Result};
use crate::scalar::Scalar;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input, coordinate)` of the worst relative error.
    pub worst: (usize, usize),
    pub coords_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Magnitudes below this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-5;

/// Compare reverse-mode gradients of a scalar function against central
/// differences with step `h` in every coordinate of every input.
///
/// `f` builds the function on a fresh graph from the given input variables.
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn finite_diff_check<T, F>(f: F, inputs: &[Tensor<T>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<T>]| -> Result<T> {
        let g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(usage("finite_diff_check: function must be scalar-valued"));
        }
        Ok(g.item(out))
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, worst: (0, 0), coords_checked: 0, tol };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for c in 0..inputs[i].len() {
            let x0 = inputs[i].data()[c];
            work[i].data_mut()[c] = x0 + T::c(h);
            let fp = eval(&work)?;
            work[i].data_mut()[c] = x0 - T::c(h);
            let fm = eval(&work)?;
            work[i].data_mut()[c] = x0;
            let numeric = (fp - fm).f64() / (2.0 * h);
            let a = analytic.data()[c].f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, c);
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
