//! Central finite-difference verification of analytic gradients.
//!
//! Runs in f64 only; single-precision finite differences are too noisy to
//! verify against. The numeric side re-evaluates the loss closure with
//! perturbed parameters and never touches the backward pass it checks.

use indexmap::IndexMap;

use crate::error::{MoltError, Result};
use crate::numerics::store::{forward_backward, forward_loss, ParamStore, Session};
use crate::numerics::graph::NodeId;

/// Relative-error floor so tiny gradients don't blow up the ratio.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per parameter name.
    pub per_param: IndexMap<String, f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.values().cloned().fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&String, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite errors"))
            .map(|(n, &e)| (n, e))
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `build` must construct the identical loss for any parameter values; it is
/// invoked `2 * num_trainable_elements + 1` times.
pub fn grad_check<F>(params: &ParamStore<f64>, eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<f64>) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(MoltError::Config(format!("grad_check eps must be > 0, got {eps}")));
    }
    let (_, analytic) = forward_backward(params, &build)?;

    let mut per_param = IndexMap::new();
    for (name, p) in params.iter() {
        if !p.trainable {
            continue;
        }
        let ag = analytic
            .get(name)
            .ok_or_else(|| MoltError::Config(format!("missing analytic gradient for {name}")))?;
        let mut max_err = 0.0f64;
        for i in 0..p.tensor.numel() {
            let orig = p.tensor.data()[i];

            let mut plus = params.clone();
            plus.get_mut(name)?.tensor.data_mut()[i] = orig + eps;
            let lp = forward_loss(&plus, &build)?;

            let mut minus = params.clone();
            minus.get_mut(name)?.tensor.data_mut()[i] = orig - eps;
            let lm = forward_loss(&minus, &build)?;

            let numeric = (lp - lm) / (2.0 * eps);
            let a = ag.data()[i];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            let err = (a - numeric).abs() / denom;
            if err > max_err {
                max_err = err;
            }
        }
        per_param.insert(name.clone(), max_err);
    }
    Ok(GradCheckReport { per_param })
}
