//! Central finite-difference gradient checking in 64-bit.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative error with a denominator floor so that coordinates whose true
/// gradient is (numerically) zero are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Default floor for [`rel_err`].
pub const REL_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `h`.
///
/// `stride` checks every `stride`-th coordinate of each input (1 = all).
pub fn check<F>(inputs: &[Tensor<f64>], f: F, h: f64, stride: usize) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let graph = Graph::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let loss = f(&graph, &vars)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| grads.get(*v).cloned().expect("leaf gradient"))
        .collect();

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vs: Vec<Var<'_, f64>> = ins.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vs)?.value().item())
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in (0..input.numel()).step_by(stride.max(1)) {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[k].data()[i];
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric, REL_FLOOR));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}
