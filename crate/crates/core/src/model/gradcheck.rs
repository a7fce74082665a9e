use crate::autodiff::relative_error;
use crate::data::MiniBatch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::DgmnModel;

/// Outcome of comparing backprop against central differences on every
/// parameter entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradCheck {
    pub eps: f64,
    pub max_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    pub entries: usize,
    /// Worst error per parameter, in parameter order.
    pub per_param: Vec<(String, f64)>,
}

impl ModelGradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error < tolerance
    }
}

/// Finite-difference check of the batch loss. Question ranks are computed
/// once at the unperturbed point and held fixed, matching how they enter the
/// loss as constants.
pub fn model_grad_check<T: Scalar>(model: &DgmnModel<T>, batch: &MiniBatch, eps: f64) -> Result<ModelGradCheck> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Config(format!("gradient check step must lie in (0, 1e-3], got {eps}")));
    }
    let (_, analytic, forward) = model.loss_and_gradients(batch, None)?;
    let ranks = model.question_ranks(&forward.weights);
    let mut probe = model.clone();
    let names: Vec<&'static str> = model.named_params().iter().map(|(n, _)| *n).collect();
    let mut report = ModelGradCheck {
        eps,
        max_error: 0.0,
        worst: (String::new(), 0),
        entries: 0,
        per_param: Vec::with_capacity(names.len()),
    };
    for (p, name) in names.iter().enumerate() {
        let mut worst_here = 0.0f64;
        for i in 0..analytic[p].len() {
            let original = probe.named_params()[p].1.data()[i];
            let shift = |probe: &mut DgmnModel<T>, v: T| probe.named_params_mut()[p].1.data_mut()[i] = v;
            shift(&mut probe, original + T::lit(eps));
            let plus = probe.loss(batch, Some(&ranks))?.as_f64();
            shift(&mut probe, original - T::lit(eps));
            let minus = probe.loss(batch, Some(&ranks))?.as_f64();
            shift(&mut probe, original);
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[p].data()[i].as_f64(), numeric);
            worst_here = worst_here.max(err);
            if report.entries == 0 || err > report.max_error {
                report.max_error = err;
                report.worst = (name.to_string(), i);
            }
            report.entries += 1;
        }
        report.per_param.push((name.to_string(), worst_here));
    }
    Ok(report)
}
