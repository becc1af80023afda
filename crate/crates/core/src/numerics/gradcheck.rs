//! Central-difference verification of analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{Bound, ParameterStore};
use crate::numerics::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterError {
    pub name: String,
    pub max_relative_error: f64,
    pub max_abs_analytic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub per_parameter_errors: Vec<ParameterError>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }

    /// Merges reports from independent checks; names must not collide.
    pub fn merge(reports: impl IntoIterator<Item = GradCheckReport>) -> Self {
        let per_parameter_errors: Vec<ParameterError> =
            reports.into_iter().flat_map(|r| r.per_parameter_errors).collect();
        Self::from_errors(per_parameter_errors)
    }

    fn from_errors(per_parameter_errors: Vec<ParameterError>) -> Self {
        let worst = per_parameter_errors
            .iter()
            .fold(None::<&ParameterError>, |w, e| match w {
                Some(w) if w.max_relative_error >= e.max_relative_error => Some(w),
                _ => Some(e),
            });
        Self {
            max_relative_error: worst.map_or(0.0, |w| w.max_relative_error),
            worst_parameter: worst.map_or_else(String::new, |w| w.name.clone()),
            per_parameter_errors,
        }
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<T, F>(params: &ParameterStore<T>, objective: &F) -> Result<T>
where
    T: Scalar,
    F: Fn(&Bound<'_, T>) -> Result<Var>,
{
    let graph = Graph::new();
    let bound = params.bind(&graph);
    let out = objective(&bound)?;
    Ok(graph.scalar(out))
}

/// Objective value and its gradient w.r.t. every parameter, in store order.
pub fn analytic_gradients<T, F>(params: &ParameterStore<T>, objective: &F) -> Result<(T, Vec<Tensor<T>>)>
where
    T: Scalar,
    F: Fn(&Bound<'_, T>) -> Result<Var>,
{
    let graph = Graph::new();
    let bound = params.bind(&graph);
    let out = objective(&bound)?;
    let value = graph.scalar(out);
    let mut grads = graph.backward(out)?;
    Ok((value, bound.collect(&mut grads)))
}

/// Compares `analytic` against central differences of `objective`.
pub fn compare_with_finite_differences<T, F>(
    params: &ParameterStore<T>,
    analytic: &[Tensor<T>],
    epsilon: T,
    objective: &F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Bound<'_, T>) -> Result<Var>,
{
    let mut probe = params.clone();
    let two_eps = (epsilon + epsilon).to_f64_lossy();
    let mut errors = Vec::with_capacity(params.len());
    for id in params.ids() {
        let name = params.name(id).to_string();
        let mut worst = 0.0_f64;
        let mut max_abs = 0.0_f64;
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + epsilon;
            let plus = evaluate(&probe, objective)?;
            probe.get_mut(id).data_mut()[j] = orig - epsilon;
            let minus = evaluate(&probe, objective)?;
            probe.get_mut(id).data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteObjective { parameter: name });
            }
            let numeric = (plus.to_f64_lossy() - minus.to_f64_lossy()) / two_eps;
            let a = analytic[id.index()].data()[j].to_f64_lossy();
            max_abs = max_abs.max(a.abs());
            worst = worst.max(relative_error(a, numeric));
        }
        errors.push(ParameterError {
            name,
            max_relative_error: worst,
            max_abs_analytic: max_abs,
        });
    }
    Ok(GradCheckReport::from_errors(errors))
}

/// Checks the analytic gradient of a scalar `objective` against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε` for every coordinate of `params`.
pub fn finite_diff_gradient_check<T, F>(params: &ParameterStore<T>, epsilon: T, objective: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Bound<'_, T>) -> Result<Var>,
{
    let (value, analytic) = analytic_gradients(params, &objective)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteObjective {
            parameter: "<unperturbed>".into(),
        });
    }
    compare_with_finite_differences(params, &analytic, epsilon, &objective)
}
