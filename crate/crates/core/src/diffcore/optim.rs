use crate::diffcore::ParamGroup;
use crate::error::{GatnError, Result};

/// Plain SGD: `values -= lr * grads`, then clears the gradients.
///
/// Refuses to move if any gradient is non-finite; the group is left
/// untouched so the caller can report which group blew up.
pub fn sgd_step(params: &mut ParamGroup, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(GatnError::config(format!("learning rate {lr} for `{}`", params.name())));
    }
    if let Some(i) = params.grads().iter().position(|g| !g.is_finite()) {
        return Err(GatnError::numerical(
            params.name(),
            format!("non-finite gradient {} at coordinate {i}", params.grads()[i]),
        ));
    }
    params.apply_update(lr);
    if let Some(i) = params.values().iter().position(|v| !v.is_finite()) {
        return Err(GatnError::numerical(
            params.name(),
            format!("parameter {i} became non-finite after the update"),
        ));
    }
    Ok(())
}
