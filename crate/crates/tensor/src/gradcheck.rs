//! Central finite-difference gradient checking.

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric|` over all checked entries, divided by the
    /// largest gradient magnitude of the same input.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.max_rel_error.is_finite()
    }
}

/// Compares autodiff gradients of a scalar function against central finite
/// differences with step `h`, for every entry of every input.
///
/// `f` receives a fresh graph and one leaf per input and must return a
/// single-element var.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(invalid("check_gradients", "function must return a scalar"));
    }
    g.backward_scalar(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, n) in analytic.data().iter().zip(&numeric) {
            let abs = (a - n).abs();
            report.max_abs_error = report.max_abs_error.max(abs);
            if scale > 0.0 {
                report.max_rel_error = report.max_rel_error.max(abs / scale);
            } else if abs > 0.0 {
                report.max_rel_error = f64::INFINITY;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
