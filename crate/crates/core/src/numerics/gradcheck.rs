//! Central finite-difference oracle for reverse-mode gradients.

use crate::error::{Error, Result};
use crate::numerics::params::{ParamGrads, ParamSet};

#[derive(Debug, Clone)]
pub struct GradReport {
    /// (parameter name, max relative error over its scalars)
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn summary(&self) -> String {
        format!(
            "{} (max rel err {:.3e} at {}, tol {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.worst_param,
            self.tolerance
        )
    }
}

/// Compare reverse-mode gradients against (f(x+h)−f(x−h))/2h per scalar
/// parameter. `eval(params, true)` must return the analytic gradients;
/// `eval(params, false)` only the loss value. The loss function must be
/// deterministic.
pub fn grad_check<F>(
    params: &mut ParamSet,
    step: f64,
    tolerance: f64,
    mut eval: F,
) -> Result<GradReport>
where
    F: FnMut(&ParamSet) -> (f64, Option<ParamGrads>),
{
    if !(step > 1e-8 && step < 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "grad_check: step {step} outside (1e-8, 1e-2)"
        )));
    }
    let (loss0, grads) = eval(params);
    if !loss0.is_finite() {
        return Err(Error::NonFinite("grad_check: baseline loss".into()));
    }
    let grads = grads.expect("eval must return gradients at the baseline point");

    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0_f64;
    let mut worst_param = String::new();
    for pi in 0..params.len() {
        let name = params.by_index(pi).name.clone();
        let numel = params.by_index(pi).value.numel();
        let mut worst = 0.0_f64;
        for si in 0..numel {
            let orig = params.by_index(pi).value.data[si];
            params.by_index_mut(pi).value.data[si] = orig + step;
            let (lp, _) = eval(params);
            params.by_index_mut(pi).value.data[si] = orig - step;
            let (lm, _) = eval(params);
            params.by_index_mut(pi).value.data[si] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: loss while perturbing {name}[{si}]"
                )));
            }
            let g_fd = (lp - lm) / (2.0 * step);
            let g_ad = grads.bufs[pi][si];
            let rel = (g_ad - g_fd).abs() / g_ad.abs().max(g_fd.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
        if worst > max_rel_err {
            max_rel_err = worst;
            worst_param = name.clone();
        }
        per_param.push((name, worst));
    }
    Ok(GradReport {
        per_param,
        max_rel_err,
        worst_param,
        tolerance,
        pass: max_rel_err <= tolerance,
    })
}
