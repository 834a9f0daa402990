//! Central finite-difference gradient checking.
//!
//! Only forward values are used here, so the check stays independent of the
//! backward rules it validates.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Largest absolute error over all checked coordinates.
    pub max_abs_err: f64,
    pub coords: usize,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

/// Relative error with a unit floor on the denominator, so coordinates whose
/// true gradient is ~0 are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Check `build`'s scalar output against central differences with step `eps`
/// for every coordinate of every input.
pub fn check<F>(inputs: &[Tensor], eps: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        coords: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let orig = t.data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti].data()[j];
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.coords += 1;
        }
    }
    Ok(report)
}
