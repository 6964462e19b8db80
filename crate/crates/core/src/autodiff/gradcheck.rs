//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Perturbation for `(L(p+ε) - L(p-ε)) / 2ε`.
    pub epsilon: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Offender {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Offender>,
    pub elements_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_loss<T, F>(params: &ParamStore<T>, forward: &F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = forward(&mut g, params)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "loss must be scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0].as_f64())
}

/// Compares the gradient of every element of every parameter in `params`
/// against central differences. `forward` must bind parameters from the store
/// it is given and return a scalar loss node.
pub fn grad_check<T, F>(
    params: &ParamStore<T>,
    forward: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<NodeId>,
{
    let first = eval_loss(params, &forward)?;
    let second = eval_loss(params, &forward)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism(format!(
            "loss {first:e} then {second:e}"
        )));
    }

    let mut g = Graph::new();
    let loss = forward(&mut g, params)?;
    let analytic = g.backward(loss)?.into_param_map();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        elements_checked: 0,
        tolerance: opts.tolerance,
    };
    let mut probe = params.clone();
    let eps = T::lit(opts.epsilon);
    for p in params.iter() {
        let Some(ga) = analytic.get(&p.name) else {
            return Err(Error::Contract(format!(
                "parameter `{}` was not bound by the forward function",
                p.name
            )));
        };
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            probe.get_mut(&p.name).unwrap().data_mut()[i] = orig + eps;
            let plus = eval_loss(&probe, &forward)?;
            probe.get_mut(&p.name).unwrap().data_mut()[i] = orig - eps;
            let minus = eval_loss(&probe, &forward)?;
            probe.get_mut(&p.name).unwrap().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = ga.data()[i].as_f64();
            let err = relative_error(a, numeric);
            report.elements_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(Offender {
                    param: p.name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
