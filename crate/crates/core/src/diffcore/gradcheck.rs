//! Central finite-difference verification of reverse-mode gradients.

use rand::Rng;

use crate::diffcore::ParamGroup;
use crate::error::{GatnError, Result};

/// Anything that exposes its trainable parameter groups.
pub trait Parameterized {
    fn groups(&self) -> Vec<&ParamGroup>;
    fn groups_mut(&mut self) -> Vec<&mut ParamGroup>;
}

impl Parameterized for ParamGroup {
    fn groups(&self) -> Vec<&ParamGroup> {
        vec![self]
    }
    fn groups_mut(&mut self) -> Vec<&mut ParamGroup> {
        vec![self]
    }
}

impl Parameterized for Vec<ParamGroup> {
    fn groups(&self) -> Vec<&ParamGroup> {
        self.iter().collect()
    }
    fn groups_mut(&mut self) -> Vec<&mut ParamGroup> {
        self.iter_mut().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub group: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<ProbeResult>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ProbeResult> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences at `probes`
/// randomly chosen coordinates (all coordinates if there are fewer).
///
/// `loss` must evaluate the scalar loss for the current parameter values
/// and accumulate its gradient into the groups' grad slots. It is called
/// twice at the unperturbed point; differing values mean the evaluator is
/// not deterministic and the check is rejected.
pub fn grad_check<M, F, R>(model: &mut M, probes: usize, h: f64, rng: &mut R, mut loss: F) -> Result<GradCheckReport>
where
    M: Parameterized + ?Sized,
    F: FnMut(&mut M) -> Result<f64>,
    R: Rng + ?Sized,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(GatnError::usage(format!("finite-difference step {h}")));
    }
    model.groups_mut().into_iter().for_each(ParamGroup::zero_grad);
    let base = loss(model)?;
    let analytic: Vec<Vec<f64>> = model.groups().iter().map(|g| g.grads().to_vec()).collect();
    model.groups_mut().into_iter().for_each(ParamGroup::zero_grad);
    let again = loss(model)?;
    if base.to_bits() != again.to_bits() {
        return Err(GatnError::InvalidCheck(format!(
            "loss evaluator is not deterministic ({base} vs {again})"
        )));
    }

    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let coords: Vec<usize> = if probes >= total {
        (0..total).collect()
    } else {
        rand::seq::index::sample(rng, total, probes).into_vec()
    };

    let mut results = Vec::with_capacity(coords.len());
    for flat in coords {
        let (mut group, mut index) = (0, flat);
        while index >= sizes[group] {
            index -= sizes[group];
            group += 1;
        }
        let original = model.groups()[group].values()[index];
        model.groups_mut()[group].values_mut()[index] = original + h;
        let plus = loss(model)?;
        model.groups_mut()[group].values_mut()[index] = original - h;
        let minus = loss(model)?;
        model.groups_mut()[group].values_mut()[index] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[group][index];
        results.push(ProbeResult {
            group: model.groups()[group].name().to_string(),
            index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    model.groups_mut().into_iter().for_each(ParamGroup::zero_grad);
    let max_rel_error = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        probes: results,
    })
}
