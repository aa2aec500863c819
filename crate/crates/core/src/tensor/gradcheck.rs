use thiserror::Error;

use super::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("eps must lie in (0, 1e-2], got {0}")]
    BadEps(f64),
    #[error("analytic gradient of parameter {param} element {element} is not finite")]
    NonFinite { param: usize, element: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss from the parameter vars it is handed. Returns the
/// largest `|analytic − numeric| / (|analytic| + 1e-8)` over all elements.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(GradCheckError::BadEps(eps));
    }
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
    let loss = f(&mut graph, &vars)?;
    let analytic = graph.backward(loss)?.collect(&vars);

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.len() {
            let a = grad.data()[ei];
            if !a.is_finite() {
                return Err(GradCheckError::NonFinite {
                    param: pi,
                    element: ei,
                });
            }
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / (a.abs() + 1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, ei));
            }
        }
    }
    Ok(report)
}
